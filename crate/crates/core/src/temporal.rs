//! Fixed-width temporal dissection into transaction snapshots.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{build_graph, Transaction, TransactionalGraph};

/// Window width in whole seconds. Parses `7d`, `24h`, `30m`, `45s`, `1w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Resolution(i64);

impl Resolution {
    pub const WEEK: Resolution = Resolution(7 * 86_400);

    pub fn from_secs(secs: i64) -> Result<Self> {
        if secs <= 0 {
            return Err(Error::Config(format!("resolution must be positive, got {secs}s")));
        }
        Ok(Resolution(secs))
    }

    pub fn secs(self) -> i64 {
        self.0
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: i64 = num
            .parse()
            .map_err(|_| Error::Config(format!("bad resolution `{s}`")))?;
        let mult = match unit {
            "" | "s" => 1,
            "m" => 60,
            "h" => 3_600,
            "d" => 86_400,
            "w" => 7 * 86_400,
            _ => return Err(Error::Config(format!("bad resolution unit in `{s}`"))),
        };
        Resolution::from_secs(n * mult)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        if s % 86_400 == 0 {
            write!(f, "{}d", s / 86_400)
        } else if s % 3_600 == 0 {
            write!(f, "{}h", s / 3_600)
        } else if s % 60 == 0 {
            write!(f, "{}m", s / 60)
        } else {
            write!(f, "{s}s")
        }
    }
}

impl Serialize for Resolution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The transactional graph of one `[start, end)` window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSnapshot {
    /// Window number counted from the origin; omitted empty windows leave gaps.
    pub index: u64,
    pub start: i64,
    pub end: i64,
    pub transactions: Vec<Transaction>,
    pub graph: TransactionalGraph,
}

/// Midnight UTC of the day containing `t`.
pub fn day_floor(t: i64) -> i64 {
    t.div_euclid(86_400) * 86_400
}

/// Splits `txs` into half-open windows of width `rho` starting at `origin`
/// (default: midnight UTC of the earliest transaction's day). Windows without
/// transactions are not emitted.
pub fn dissect(
    txs: &[Transaction],
    rho: Resolution,
    origin: Option<i64>,
) -> Result<Vec<TemporalSnapshot>> {
    let earliest = txs
        .iter()
        .map(|t| t.timestamp)
        .min()
        .ok_or_else(|| Error::Data("cannot dissect an empty transaction sequence".into()))?;
    let origin = origin.unwrap_or_else(|| day_floor(earliest));
    if earliest < origin {
        return Err(Error::Data(format!(
            "transaction at {earliest} precedes the window origin {origin}"
        )));
    }
    let mut buckets: BTreeMap<u64, Vec<Transaction>> = BTreeMap::new();
    for t in txs {
        let k = ((t.timestamp - origin) / rho.secs()) as u64;
        buckets.entry(k).or_default().push(t.clone());
    }
    Ok(buckets
        .into_iter()
        .map(|(index, transactions)| {
            let start = origin + index as i64 * rho.secs();
            TemporalSnapshot {
                index,
                start,
                end: start + rho.secs(),
                graph: build_graph(&transactions),
                transactions,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tx(s: &str, r: &str, t: i64) -> Transaction {
        Transaction {
            sender: s.into(),
            receiver: r.into(),
            timestamp: t,
            source_row: 0,
        }
    }

    #[test]
    fn parses_and_prints_resolutions() {
        assert_eq!("7d".parse::<Resolution>().unwrap(), Resolution::WEEK);
        assert_eq!("24h".parse::<Resolution>().unwrap().secs(), 86_400);
        assert_eq!("90".parse::<Resolution>().unwrap().secs(), 90);
        assert_eq!(Resolution::WEEK.to_string(), "7d");
        assert!("0d".parse::<Resolution>().is_err());
        assert!("7y".parse::<Resolution>().is_err());
        assert!("d".parse::<Resolution>().is_err());
    }

    #[test]
    fn boundary_timestamp_opens_next_window() {
        let snaps = dissect(&[tx("a", "b", 0), tx("b", "c", 604_800)], Resolution::WEEK, None).unwrap();
        assert_eq!(snaps.len(), 2);
        assert_eq!(snaps[1].index, 1);
        assert_eq!(snaps[1].transactions[0].timestamp, 604_800);
        assert_eq!(snaps[1].start, 604_800);
    }

    #[test]
    fn one_week_gives_one_snapshot() {
        let txs: Vec<_> = (0..10).map(|i| tx(&format!("a{i}"), "b", 3_600 + i * 50_000)).collect();
        let snaps = dissect(&txs, Resolution::WEEK, None).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].graph.node_count(), 11);
        assert_eq!(snaps[0].start, 0);
    }

    #[test]
    fn empty_windows_are_skipped_and_empty_input_rejected() {
        let snaps = dissect(&[tx("a", "b", 10), tx("a", "b", 3 * 604_800 + 5)], Resolution::WEEK, None)
            .unwrap();
        assert_eq!(snaps.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 3]);
        assert!(dissect(&[], Resolution::WEEK, None).is_err());
        assert!(dissect(&[tx("a", "b", 5)], Resolution::WEEK, Some(10)).is_err());
    }

    #[test]
    fn forty_six_weeks_of_synthetic_data() {
        use crate::synthgen::CorpusPlan;
        let plan = CorpusPlan {
            per_pattern: 8,
            windows: 46,
            noise_edges: 0,
            ..CorpusPlan::default()
        };
        let c = plan.generate(1).unwrap();
        let snaps = dissect(&c.transactions, "7d".parse().unwrap(), Some(plan.start)).unwrap();
        assert_eq!(snaps.len(), 46);
        assert_eq!(snaps.last().unwrap().index, 45);
    }

    proptest! {
        #[test]
        fn snapshots_partition_the_input(
            times in prop::collection::vec(0i64..5_000_000, 1..60),
            rho in 1i64..2_000_000,
        ) {
            let txs: Vec<_> = times.iter().enumerate()
                .map(|(i, &t)| tx(&format!("s{i}"), &format!("r{}", i % 7), t))
                .collect();
            let snaps = dissect(&txs, Resolution::from_secs(rho).unwrap(), None).unwrap();
            let total: usize = snaps.iter().map(|s| s.graph.multi_edges.len()).sum();
            prop_assert_eq!(total, txs.len());
            for s in &snaps {
                prop_assert_eq!(s.end - s.start, rho);
                prop_assert!(s.transactions.iter().all(|t| s.start <= t.timestamp && t.timestamp < s.end));
            }
        }

        #[test]
        fn shifting_by_rho_shifts_indices(
            times in prop::collection::vec(0i64..3_000_000, 1..40),
        ) {
            let rho = Resolution::WEEK;
            let txs: Vec<_> = times.iter().enumerate()
                .map(|(i, &t)| tx(&format!("s{i}"), "r", t))
                .collect();
            let shifted: Vec<_> = txs.iter()
                .map(|t| Transaction { timestamp: t.timestamp + rho.secs(), ..t.clone() })
                .collect();
            let origin = Some(0);
            let a = dissect(&txs, rho, origin).unwrap();
            let b = dissect(&shifted, rho, origin).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.index + 1, y.index);
                prop_assert_eq!(&x.graph.simple, &y.graph.simple);
            }
        }
    }
}
