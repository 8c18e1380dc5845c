//! Cross-pattern reconstruction matrices, verdicts and the report bundle.
//!
//! Entry `(p, q)` of a variant's matrix is the mean reconstruction error of
//! the model trained on pattern `p` over the validation communities of
//! pattern `q`. A model detects its pattern when its diagonal entry is the
//! row minimum. The separability margin of row `p` is the smallest
//! off-diagonal entry minus the diagonal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gae::{reconstruction_errors, GaeModel, GraphInput, Variant};
use crate::indicators::Pattern;

pub const ABSENT: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub variant: Variant,
    /// Rows: training pattern; columns: evaluated pattern. `None` when the
    /// row's model or the column's validation set is missing.
    pub matrix: [[Option<Cell>; 6]; 6],
}

impl ReconstructionReport {
    pub fn from_matrix(variant: Variant, matrix: [[Option<Cell>; 6]; 6]) -> Self {
        ReconstructionReport { variant, matrix }
    }

    pub fn mean(&self, p: Pattern, q: Pattern) -> Option<f64> {
        self.matrix[p.index()][q.index()].map(|c| c.mean)
    }

    /// Whether the diagonal is the row minimum; `None` if it is absent.
    pub fn diag_min(&self, p: Pattern) -> Option<bool> {
        let d = self.mean(p, p)?;
        Some(Pattern::ALL.iter().filter_map(|&q| self.mean(p, q)).all(|v| d <= v))
    }

    pub fn diag_min_flags(&self) -> [Option<bool>; 6] {
        Pattern::ALL.map(|p| self.diag_min(p))
    }

    pub fn diag_min_count(&self) -> usize {
        self.diag_min_flags().iter().filter(|f| **f == Some(true)).count()
    }

    /// `min_{q != p} M[p][q] - M[p][p]` over present entries.
    pub fn margin(&self, p: Pattern) -> Option<f64> {
        let d = self.mean(p, p)?;
        Pattern::ALL
            .iter()
            .filter(|&&q| q != p)
            .filter_map(|&q| self.mean(p, q))
            .reduce(f64::min)
            .map(|m| m - d)
    }

    pub fn margins(&self) -> [Option<f64>; 6] {
        Pattern::ALL.map(|p| self.margin(p))
    }
}

/// Evaluates every available model against every validation set.
/// `models[p]` is the model trained on pattern `p`; `val_sets[q]` holds the
/// validation communities of pattern `q`.
pub fn cross_evaluate(
    variant: Variant,
    models: &[Option<&GaeModel>; 6],
    val_sets: &[Vec<&GraphInput>; 6],
) -> Result<ReconstructionReport> {
    let mut matrix = [[None; 6]; 6];
    for p in Pattern::ALL {
        let Some(model) = models[p.index()] else {
            continue;
        };
        if model.variant != variant || model.pattern != p {
            return Err(Error::Data(format!(
                "model in slot {variant}/{p} was trained as {}/{}",
                model.variant, model.pattern
            )));
        }
        for q in Pattern::ALL {
            let set = &val_sets[q.index()];
            if set.is_empty() {
                continue;
            }
            let errs = reconstruction_errors(model, set)?;
            matrix[p.index()][q.index()] = Some(Cell {
                mean: errs.iter().sum::<f64>() / errs.len() as f64,
                n: errs.len(),
            });
        }
    }
    Ok(ReconstructionReport { variant, matrix })
}

/// Per pattern, the variant with the largest margin among those whose
/// diagonal is the row minimum. Ties keep the earlier variant in
/// GCN, SAGE, GAT order.
pub fn select_best(reports: &[ReconstructionReport]) -> [Option<(Variant, f64)>; 6] {
    let mut ordered: Vec<&ReconstructionReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.variant);
    Pattern::ALL.map(|p| {
        let mut best: Option<(Variant, f64)> = None;
        for r in &ordered {
            if r.diag_min(p) != Some(true) {
                continue;
            }
            let Some(m) = r.margin(p) else {
                continue;
            };
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((r.variant, m));
            }
        }
        best
    })
}

fn fmt_num(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:?}"))
}

fn parse_num(s: &str) -> Result<Option<f64>> {
    if s == ABSENT {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Serde(format!("bad number `{s}` in report")))
}

pub fn matrix_csv(r: &ReconstructionReport) -> String {
    let mut s = String::from("train_pattern");
    for q in Pattern::ALL {
        write!(s, ",{q}").expect("string write");
    }
    s.push('\n');
    for p in Pattern::ALL {
        s.push_str(p.name());
        for q in Pattern::ALL {
            write!(s, ",{}", fmt_num(r.mean(p, q))).expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn long_csv(reports: &[ReconstructionReport]) -> String {
    let mut s = String::from("variant,train_pattern,eval_pattern,mean_error,n\n");
    for r in reports {
        for p in Pattern::ALL {
            for q in Pattern::ALL {
                let c = r.matrix[p.index()][q.index()];
                writeln!(
                    s,
                    "{},{p},{q},{},{}",
                    r.variant,
                    fmt_num(c.map(|c| c.mean)),
                    c.map_or(0, |c| c.n)
                )
                .expect("string write");
            }
        }
    }
    s
}

/// Human-readable tables, verdicts and the per-pattern selection.
pub fn report_text(reports: &[ReconstructionReport]) -> String {
    let abbrev = ["COL", "SNK", "CLS", "BRN", "SG", "GS"];
    let mut s = String::new();
    for r in reports {
        writeln!(s, "== {} ==", r.variant.name().to_uppercase()).expect("string write");
        write!(s, "{:<16}", "train \\ eval").expect("string write");
        for a in abbrev {
            write!(s, "{a:>10}").expect("string write");
        }
        writeln!(s, "{:>10}{:>10}", "diag_min", "margin").expect("string write");
        for p in Pattern::ALL {
            write!(s, "{:<16}", p.name()).expect("string write");
            for q in Pattern::ALL {
                let cell = r.mean(p, q).map_or_else(|| ABSENT.to_string(), |v| format!("{v:.4}"));
                let mark = if p == q { "*" } else { " " };
                write!(s, "{:>9}{mark}", cell).expect("string write");
            }
            let flag = match r.diag_min(p) {
                Some(true) => "yes",
                Some(false) => "no",
                None => ABSENT,
            };
            let margin = r.margin(p).map_or_else(|| ABSENT.to_string(), |m| format!("{m:+.4}"));
            writeln!(s, "{flag:>10}{margin:>10}").expect("string write");
        }
        writeln!(s, "diagonal minimum on {}/6 patterns\n", r.diag_min_count()).expect("string write");
    }
    writeln!(s, "== best separability ==").expect("string write");
    for (p, best) in Pattern::ALL.iter().zip(select_best(reports)) {
        match best {
            Some((v, m)) => writeln!(s, "{:<16}{:>6} margin {m:+.4}", p.name(), v.name()),
            None => writeln!(s, "{:<16}{:>6}", p.name(), "none"),
        }
        .expect("string write");
    }
    s
}

/// Bundle file names and contents, in a fixed order.
pub fn bundle_files(reports: &[ReconstructionReport]) -> Vec<(String, String)> {
    let mut ordered = reports.to_vec();
    ordered.sort_by_key(|r| r.variant);
    let mut files: Vec<(String, String)> = ordered
        .iter()
        .map(|r| (format!("matrix_{}.csv", r.variant), matrix_csv(r)))
        .collect();
    files.push(("report.txt".into(), report_text(&ordered)));
    files.push(("long.csv".into(), long_csv(&ordered)));
    files
}

pub fn emit_report(reports: &[ReconstructionReport], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (name, body) in bundle_files(reports) {
        let path = dir.join(&name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    Ok(names)
}

/// Rebuilds reports from a bundle's `long.csv` and checks each
/// `matrix_<variant>.csv` against it.
pub fn parse_bundle(dir: &Path) -> Result<Vec<ReconstructionReport>> {
    let long_path = dir.join("long.csv");
    let mut rdr = csv::Reader::from_path(&long_path).map_err(|e| Error::csv(&long_path, e))?;
    let mut by_variant: BTreeMap<Variant, [[Option<Cell>; 6]; 6]> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(&long_path, e))?;
        if rec.len() != 5 {
            return Err(Error::Serde(format!("long.csv row with {} fields", rec.len())));
        }
        let v: Variant = rec[0].parse()?;
        let p: Pattern = rec[1].parse()?;
        let q: Pattern = rec[2].parse()?;
        let n: usize = rec[4]
            .parse()
            .map_err(|_| Error::Serde(format!("bad count `{}`", &rec[4])))?;
        let cell = parse_num(&rec[3])?.map(|mean| Cell { mean, n });
        by_variant.entry(v).or_insert([[None; 6]; 6])[p.index()][q.index()] = cell;
    }
    let reports: Vec<ReconstructionReport> = by_variant
        .into_iter()
        .map(|(variant, matrix)| ReconstructionReport { variant, matrix })
        .collect();
    for r in &reports {
        let path = dir.join(format!("matrix_{}.csv", r.variant));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if text != matrix_csv(r) {
            return Err(Error::Data(format!("{} disagrees with long.csv", path.display())));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(variant: Variant, rows: [[f64; 6]; 6]) -> ReconstructionReport {
        ReconstructionReport {
            variant,
            matrix: rows.map(|r| r.map(|v| Some(Cell { mean: v, n: 3 }))),
        }
    }

    fn diagonal(d: f64, off: f64) -> [[f64; 6]; 6] {
        std::array::from_fn(|p| std::array::from_fn(|q| if p == q { d } else { off + q as f64 * 0.01 }))
    }

    #[test]
    fn margin_arithmetic() {
        let mut rows = diagonal(0.1, 0.4);
        rows[0][3] = 0.4;
        let r = report(Variant::Gcn, rows);
        assert!((r.margin(Pattern::Collector).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(r.diag_min_count(), 6);
    }

    #[test]
    fn identical_rows_when_models_coincide() {
        let row = [0.5, 0.6, 0.2, 0.9, 0.7, 0.4];
        let r = report(Variant::Sage, [row; 6]);
        assert_eq!(r.diag_min(Pattern::Collusion), Some(true));
        assert_eq!(r.diag_min(Pattern::Collector), Some(false));
        let equal = report(Variant::Sage, [[0.3; 6]; 6]);
        assert!(equal.margins().iter().all(|m| *m == Some(0.0)));
        assert_eq!(equal.diag_min_count(), 6);
    }

    #[test]
    fn absent_entries() {
        let mut r = report(Variant::Gat, diagonal(0.2, 0.5));
        r.matrix[2] = [None; 6];
        for row in r.matrix.iter_mut() {
            row[5] = None;
        }
        assert_eq!(r.diag_min(Pattern::Collusion), None);
        assert_eq!(r.margin(Pattern::Collusion), None);
        assert_eq!(r.diag_min(Pattern::GatherScatter), None);
        assert_eq!(r.diag_min(Pattern::Sink), Some(true));
        assert!(long_csv(&[r.clone()]).contains(",collusion,sink,NA,0\n"));
    }

    #[test]
    fn best_variant_selection() {
        let gcn = report(Variant::Gcn, diagonal(0.1, 0.4));
        let mut sage_rows = diagonal(0.1, 0.4);
        sage_rows[1][1] = 0.9;
        let sage = report(Variant::Sage, sage_rows);
        let gat = report(Variant::Gat, diagonal(0.05, 0.4));
        let best = select_best(&[gat.clone(), sage.clone(), gcn.clone()]);
        assert_eq!(best[0].unwrap().0, Variant::Gat);
        // Equal margins resolve to the earlier variant.
        let best = select_best(&[report(Variant::Gat, diagonal(0.1, 0.4)), gcn.clone()]);
        assert!(best.iter().all(|b| b.unwrap().0 == Variant::Gcn));
        // A variant whose diagonal is not minimal is never chosen.
        let best = select_best(&[sage]);
        assert_eq!(best[1], None);
        assert_eq!(best[0].unwrap().0, Variant::Sage);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut gat = report(Variant::Gat, diagonal(0.1 + 0.2, 1.0 / 3.0));
        gat.matrix[4][1] = None;
        let reports = vec![report(Variant::Gcn, diagonal(0.123456789012345, 0.7)), report(Variant::Sage, diagonal(0.9, 0.2)), gat];
        let names = emit_report(&reports, dir.path()).unwrap();
        assert_eq!(names, ["matrix_gcn.csv", "matrix_sage.csv", "matrix_gat.csv", "report.txt", "long.csv"]);
        let back = parse_bundle(dir.path()).unwrap();
        let mut expected = reports.clone();
        expected.sort_by_key(|r| r.variant);
        assert_eq!(back, expected);
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("== GCN ==") && text.contains("best separability"));
        std::fs::write(dir.path().join("matrix_gcn.csv"), "tampered").unwrap();
        assert!(parse_bundle(dir.path()).is_err());
    }
}
