//! Loading delimited transaction records and building transactional graphs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Digraph;

/// One transfer between two accounts. `timestamp` is UTC seconds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: String,
    pub receiver: String,
    pub timestamp: i64,
    pub source_row: usize,
}

/// Which columns of the input file hold what. Defaults follow the SAML-D
/// public release (`Time`, `Date`, `Sender_account`, `Receiver_account`).
///
/// Either `timestamp` (a combined instant) or `date` (plus an optional
/// `time`) must be set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub sender: String,
    pub receiver: String,
    pub date: Option<String>,
    pub time: Option<String>,
    pub timestamp: Option<String>,
    pub delimiter: char,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            sender: "Sender_account".into(),
            receiver: "Receiver_account".into(),
            date: Some("Date".into()),
            time: Some("Time".into()),
            timestamp: None,
            delimiter: ',',
        }
    }
}

impl ColumnMapping {
    /// `sender,receiver,timestamp` layout used for intermediate artifacts.
    pub fn canonical() -> Self {
        ColumnMapping {
            sender: "sender".into(),
            receiver: "receiver".into(),
            date: None,
            time: None,
            timestamp: Some("timestamp".into()),
            delimiter: ',',
        }
    }
}

/// Counts of what happened to each input row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub transactions: usize,
    pub self_transfers: usize,
    /// Malformed rows by reason.
    pub malformed: BTreeMap<String, usize>,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.self_transfers + self.malformed.values().sum::<usize>()
    }
}

/// Parses an instant: integer epoch seconds, RFC 3339, `YYYY-MM-DD HH:MM:SS`,
/// `YYYY-MM-DDTHH:MM:SS`, or a bare date (midnight UTC).
pub fn parse_instant(s: &str) -> Option<i64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    parse_date(s).map(|d| d.and_time(NaiveTime::MIN).and_utc().timestamp())
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    ["%Y-%m-%d", "%Y/%m/%d", "%d/%m/%Y"]
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(s.trim(), fmt).ok())
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    let s = s.trim();
    if s.is_empty() {
        return Some(NaiveTime::MIN);
    }
    ["%H:%M:%S", "%H:%M"]
        .iter()
        .find_map(|fmt| NaiveTime::parse_from_str(s, fmt).ok())
}

/// Formats UTC seconds as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn format_instant(secs: i64) -> String {
    DateTime::from_timestamp(secs, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| secs.to_string())
}

enum TimeColumns {
    Combined(usize),
    Split { date: usize, time: Option<usize> },
}

/// Reads transactions in file order, skipping malformed rows and
/// self-transfers (both counted in the report).
pub fn load_transactions(
    path: &Path,
    mapping: &ColumnMapping,
) -> Result<(Vec<Transaction>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_byte(mapping.delimiter)?)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let sender_col = column(&mapping.sender)?;
    let receiver_col = column(&mapping.receiver)?;
    let time_cols = match (&mapping.timestamp, &mapping.date) {
        (Some(ts), _) => TimeColumns::Combined(column(ts)?),
        (None, Some(date)) => TimeColumns::Split {
            date: column(date)?,
            time: mapping.time.as_deref().map(column).transpose()?,
        },
        (None, None) => {
            return Err(Error::Config(
                "column mapping names neither a timestamp nor a date column".into(),
            ))
        }
    };

    let mut report = LoadReport::default();
    let mut txs = Vec::new();
    let malformed = |report: &mut LoadReport, reason: &str| {
        *report.malformed.entry(reason.to_string()).or_insert(0) += 1;
    };
    for (row, record) in reader.records().enumerate() {
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                malformed(&mut report, "unreadable_row");
                continue;
            }
        };
        let sender = record.get(sender_col).map(str::trim).unwrap_or("");
        let receiver = record.get(receiver_col).map(str::trim).unwrap_or("");
        if sender.is_empty() || receiver.is_empty() {
            malformed(&mut report, "missing_account");
            continue;
        }
        let timestamp = match time_cols {
            TimeColumns::Combined(c) => record.get(c).and_then(parse_instant),
            TimeColumns::Split { date, time } => {
                let d = record.get(date).and_then(parse_date);
                let t = match time {
                    Some(c) => record.get(c).and_then(parse_time),
                    None => Some(NaiveTime::MIN),
                };
                d.zip(t).map(|(d, t)| d.and_time(t).and_utc().timestamp())
            }
        };
        let Some(timestamp) = timestamp else {
            malformed(&mut report, "bad_timestamp");
            continue;
        };
        if sender == receiver {
            report.self_transfers += 1;
            continue;
        }
        txs.push(Transaction {
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            timestamp,
            source_row: row,
        });
    }
    report.transactions = txs.len();
    if txs.is_empty() {
        return Err(Error::NoRows(path.to_path_buf()));
    }
    Ok((txs, report))
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| Error::Config(format!("delimiter {c:?} is not a single ASCII byte")))
}

/// Writes transactions in the layout `mapping` describes, so that
/// [`load_transactions`] with the same mapping reads them back.
pub fn write_transactions(path: &Path, txs: &[Transaction], mapping: &ColumnMapping) -> Result<()> {
    let mut buf = Vec::new();
    write_transactions_to(&mut buf, txs, mapping)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_transactions_to<W: Write>(
    out: W,
    txs: &[Transaction],
    mapping: &ColumnMapping,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter_byte(mapping.delimiter)?)
        .from_writer(out);
    let map_err = |e: csv::Error| Error::Data(format!("writing transactions: {e}"));
    let stamp = |secs: i64| DateTime::from_timestamp(secs, 0).map(|d| d.naive_utc());
    match (&mapping.timestamp, &mapping.date) {
        (Some(ts), _) => {
            w.write_record([ts.as_str(), &mapping.sender, &mapping.receiver])
                .map_err(map_err)?;
            for t in txs {
                let ts = stamp(t.timestamp)
                    .map(|d| d.format("%Y-%m-%d %H:%M:%S").to_string())
                    .unwrap_or_else(|| t.timestamp.to_string());
                w.write_record([ts.as_str(), &t.sender, &t.receiver])
                    .map_err(map_err)?;
            }
        }
        (None, Some(date)) => {
            let time = mapping.time.as_deref().unwrap_or("Time");
            w.write_record([time, date.as_str(), &mapping.sender, &mapping.receiver])
                .map_err(map_err)?;
            for t in txs {
                let d = stamp(t.timestamp)
                    .ok_or_else(|| Error::Data(format!("timestamp {} out of range", t.timestamp)))?;
                w.write_record([
                    d.format("%H:%M:%S").to_string().as_str(),
                    d.format("%Y-%m-%d").to_string().as_str(),
                    &t.sender,
                    &t.receiver,
                ])
                .map_err(map_err)?;
            }
        }
        (None, None) => {
            return Err(Error::Config(
                "column mapping names neither a timestamp nor a date column".into(),
            ))
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

/// Directed multigraph of transactions plus its collapsed simple view.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransactionalGraph {
    /// `(sender, receiver, timestamp)` with endpoints as indices into `simple`.
    pub multi_edges: Vec<(usize, usize, i64)>,
    pub simple: Digraph,
}

impl TransactionalGraph {
    pub fn node_count(&self) -> usize {
        self.simple.node_count()
    }
}

/// One multi-edge per transaction; the simple view weights each ordered
/// pair by its transaction count.
pub fn build_graph(txs: &[Transaction]) -> TransactionalGraph {
    let edges = txs
        .iter()
        .filter(|t| t.sender != t.receiver)
        .map(|t| (t.sender.clone(), t.receiver.clone(), 1));
    let simple = Digraph::from_weighted_edges(Vec::new(), edges);
    let multi_edges = txs
        .iter()
        .filter(|t| t.sender != t.receiver)
        .map(|t| {
            let s = simple.index_of(&t.sender).expect("sender indexed");
            let r = simple.index_of(&t.receiver).expect("receiver indexed");
            (s, r, t.timestamp)
        })
        .collect();
    TransactionalGraph {
        multi_edges,
        simple,
    }
}
