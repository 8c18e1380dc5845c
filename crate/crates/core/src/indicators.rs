//! Node-level pattern indicators and the single weak label per community.
//!
//! Every indicator is a pure function of the community's simple directed
//! view and lies in `[0, 1]`. Degrees count distinct counterparties.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::Digraph;

/// The six suspicious-activity patterns, in indicator order I1..I6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Collector,
    Sink,
    Collusion,
    Branching,
    ScatterGather,
    GatherScatter,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Collector,
        Pattern::Sink,
        Pattern::Collusion,
        Pattern::Branching,
        Pattern::ScatterGather,
        Pattern::GatherScatter,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Collector => "collector",
            Pattern::Sink => "sink",
            Pattern::Collusion => "collusion",
            Pattern::Branching => "branching",
            Pattern::ScatterGather => "scatter_gather",
            Pattern::GatherScatter => "gather_scatter",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', ' '], "_");
        let p = match key.as_str() {
            "collector" | "gather" => Pattern::Collector,
            "sink" | "scatter" => Pattern::Sink,
            "collusion" => Pattern::Collusion,
            "branching" => Pattern::Branching,
            "scatter_gather" | "scattergather" | "sg" => Pattern::ScatterGather,
            "gather_scatter" | "gatherscatter" | "gs" => Pattern::GatherScatter,
            _ => return Err(Error::Config(format!("unknown pattern `{s}`"))),
        };
        Ok(p)
    }
}

/// Degree-ratio score shared by the collector and sink indicators.
///
/// `R = |log2(deg / max)|`, `I = 1 - R / (10 * digits(R))` where `digits`
/// is the integer digit count of `R`, at least 1. A node needs two distinct
/// counterparties to score at all.
fn degree_ratio_score(deg: usize, max_deg: usize) -> f64 {
    if deg < 2 || max_deg == 0 {
        return 0.0;
    }
    if deg == max_deg {
        return 1.0;
    }
    let r = (deg as f64 / max_deg as f64).log2().abs();
    let digits = (r.log10().floor() + 1.0).max(1.0);
    (1.0 - r / (10.0 * digits)).clamp(0.0, 1.0)
}

/// I1: in-degree relative to the community's largest in-degree.
pub fn collector_indicator(x: usize, g: &Digraph) -> f64 {
    let max = (0..g.node_count()).map(|i| g.in_degree(i)).max().unwrap_or(0);
    degree_ratio_score(g.in_degree(x), max)
}

/// I2: out-degree relative to the community's largest out-degree.
pub fn sink_indicator(x: usize, g: &Digraph) -> f64 {
    let max = (0..g.node_count()).map(|i| g.out_degree(i)).max().unwrap_or(0);
    degree_ratio_score(g.out_degree(x), max)
}

/// I3: how often other funders of `x`'s recipients repeat, relative to
/// `x`'s out-degree. Funders seen only once are ignored; `x` itself is
/// never counted as a co-funder.
pub fn collusion_indicator(x: usize, g: &Digraph) -> f64 {
    let out = g.out_degree(x);
    if out == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; g.node_count()];
    for &v in g.successors(x) {
        for &z in g.predecessors(v) {
            if z != x {
                counts[z] += 1;
            }
        }
    }
    let repeated: Vec<usize> = counts.into_iter().filter(|&c| c >= 2).collect();
    if repeated.is_empty() {
        return 0.0;
    }
    let total: usize = repeated.iter().sum();
    total as f64 / out as f64 / repeated.len() as f64
}

/// I4: fraction of `x`'s recipients that forward to exactly two nodes.
pub fn branching_indicator(x: usize, g: &Digraph) -> f64 {
    let m = g.out_degree(x);
    if m < 2 {
        return 0.0;
    }
    let hits = g
        .successors(x)
        .iter()
        .filter(|&&v| g.out_degree(v) == 2)
        .count();
    hits as f64 / m as f64
}

/// I5: average number of two-step paths from `x` to each node it reaches in
/// exactly two steps, normalized by `x`'s total degree.
pub fn scatter_gather_indicator(x: usize, g: &Digraph) -> f64 {
    if g.out_degree(x) <= 2 {
        return 0.0;
    }
    let mut paths = vec![0usize; g.node_count()];
    for &v in g.successors(x) {
        for &y in g.successors(v) {
            if y != x {
                paths[y] += 1;
            }
        }
    }
    let reached = paths.iter().filter(|&&c| c > 0).count();
    if reached == 0 {
        return 0.0;
    }
    let deg = (g.out_degree(x) + g.in_degree(x)) as f64;
    let total: usize = paths.iter().sum();
    (total as f64 / deg / reached as f64).clamp(0.0, 1.0)
}

/// I6: balance between in- and out-degree, for nodes with more than two of each.
pub fn gather_scatter_indicator(x: usize, g: &Digraph) -> f64 {
    let (out, inn) = (g.out_degree(x), g.in_degree(x));
    if out <= 2 || inn <= 2 {
        return 0.0;
    }
    1.0 - (out as f64 - inn as f64).abs() / (out + inn) as f64
}

/// All six indicators of node `x`, in I1..I6 order.
pub fn indicator_vector(x: usize, g: &Digraph) -> [f64; 6] {
    [
        collector_indicator(x, g),
        sink_indicator(x, g),
        collusion_indicator(x, g),
        branching_indicator(x, g),
        scatter_gather_indicator(x, g),
        gather_scatter_indicator(x, g),
    ]
}

/// Weak label of one community.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLabel {
    /// `None` when every indicator of every node is zero.
    pub pattern: Option<Pattern>,
    pub score: f64,
    pub argmax_node: Option<String>,
    /// Per-indicator maximum over the community's nodes.
    pub maxima: [f64; 6],
}

/// Labels a community by its largest (node, indicator) value.
///
/// A label is assigned only when that value is strictly positive. Ties go
/// to the later, more structure-specific indicator (I6 ranks above I1),
/// then to the lowest node id.
pub fn label_community(g: &Digraph) -> PatternLabel {
    let vectors: Vec<[f64; 6]> = (0..g.node_count()).map(|x| indicator_vector(x, g)).collect();
    label_from_vectors(g.ids(), &vectors)
}

/// Argmax rule of [`label_community`] over precomputed indicator vectors,
/// one per node in `ids` order.
pub fn label_from_vectors(ids: &[String], vectors: &[[f64; 6]]) -> PatternLabel {
    let mut maxima = [0.0f64; 6];
    let mut best: Option<(f64, usize, usize)> = None;
    for (x, v) in vectors.iter().enumerate() {
        for (k, &val) in v.iter().enumerate() {
            maxima[k] = maxima[k].max(val);
            let better = match best {
                None => true,
                Some((bv, bk, _)) => val > bv || (val == bv && k > bk),
            };
            if better {
                best = Some((val, k, x));
            }
        }
    }
    match best {
        Some((score, k, x)) if score > 0.0 => PatternLabel {
            pattern: Some(Pattern::ALL[k]),
            score,
            argmax_node: Some(ids[x].clone()),
            maxima,
        },
        _ => PatternLabel {
            pattern: None,
            score: 0.0,
            argmax_node: None,
            maxima,
        },
    }
}
