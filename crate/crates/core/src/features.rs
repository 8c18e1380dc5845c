//! Per-node structural features of a community and their standardization.
//!
//! Nine columns in fixed order: in-degree, out-degree, closeness,
//! betweenness, harmonic, second-order, Laplacian, constraint, reciprocity.
//! Degrees and reciprocity keep edge direction. Distance and random-walk
//! metrics use the undirected hop graph; Laplacian centrality and Burt
//! constraint use the symmetrized multiplicity weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::community::CommunityId;
use crate::error::{Error, Result};
use crate::graph::Digraph;

pub const FEATURE_COUNT: usize = 9;

/// Bumped whenever a column definition or the column order changes.
pub const FEATURE_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "in_degree",
    "out_degree",
    "closeness",
    "betweenness",
    "harmonic",
    "second_order",
    "laplacian",
    "constraint",
    "reciprocity",
];

const STD_EPS: f64 = 1e-12;

/// Feature rows of one community, one row per node in sorted-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureMatrix {
    pub community: CommunityId,
    pub order: Vec<String>,
    pub rows: Vec<[f64; FEATURE_COUNT]>,
}

impl NodeFeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }
}

pub fn degree_features(g: &Digraph) -> (Vec<f64>, Vec<f64>) {
    let n = g.node_count();
    (
        (0..n).map(|i| g.in_degree(i) as f64).collect(),
        (0..n).map(|i| g.out_degree(i) as f64).collect(),
    )
}

/// Unweighted BFS distances from `src` over the undirected view.
fn bfs(g: &Digraph, src: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; g.node_count()];
    dist[src] = Some(0);
    let mut queue = std::collections::VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in g.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Wasserman-Faust closeness: `((r-1)/(n-1)) * ((r-1)/sum d)` where `r`
/// counts the nodes reachable from `x`, itself included.
pub fn closeness(g: &Digraph) -> Vec<f64> {
    let n = g.node_count();
    (0..n)
        .map(|x| {
            let d = bfs(g, x);
            let reach: Vec<u32> = d.iter().flatten().copied().collect();
            let r = reach.len() as f64;
            let total: u64 = reach.iter().map(|&v| u64::from(v)).sum();
            if total == 0 || n < 2 {
                0.0
            } else {
                ((r - 1.0) / (n as f64 - 1.0)) * ((r - 1.0) / total as f64)
            }
        })
        .collect()
}

pub fn harmonic(g: &Digraph) -> Vec<f64> {
    let n = g.node_count();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|x| {
            let s: f64 = bfs(g, x)
                .iter()
                .flatten()
                .filter(|&&d| d > 0)
                .map(|&d| 1.0 / f64::from(d))
                .sum();
            s / (n as f64 - 1.0)
        })
        .collect()
}

/// Brandes accumulation on the undirected hop graph, normalized so that the
/// center of a path of three scores 1.
pub fn betweenness(g: &Digraph) -> Vec<f64> {
    let n = g.node_count();
    let mut cb = vec![0.0; n];
    if n < 3 {
        return cb;
    }
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![-1i64; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in g.neighbors(v) {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    // Every unordered pair was accumulated from both endpoints.
    let scale = ((n - 1) * (n - 2)) as f64;
    cb.iter().map(|v| v / scale).collect()
}

/// Standard deviation of the first return time of the simple random walk,
/// per node, before any scaling.
pub fn return_time_std(g: &Digraph) -> Vec<f64> {
    let n = g.node_count();
    let mut out = vec![0.0; n];
    for comp in g.weak_components() {
        if comp.len() < 2 {
            continue;
        }
        let mut local = vec![usize::MAX; n];
        for (k, &v) in comp.iter().enumerate() {
            local[v] = k;
        }
        for &x in &comp {
            // Transient states: the component without x.
            let others: Vec<usize> = comp.iter().copied().filter(|&v| v != x).collect();
            let m = others.len();
            let pos = |v: usize| {
                let k = local[v];
                if k < local[x] {
                    k
                } else {
                    k - 1
                }
            };
            let mut a = DMatrix::<f64>::identity(m, m);
            let mut q = DMatrix::<f64>::zeros(m, m);
            for (row, &j) in others.iter().enumerate() {
                let p = 1.0 / g.neighbors(j).len() as f64;
                for &l in g.neighbors(j) {
                    if l != x {
                        q[(row, pos(l))] += p;
                    }
                }
            }
            a -= &q;
            let lu = a.lu();
            let ones = DVector::<f64>::from_element(m, 1.0);
            let Some(h) = lu.solve(&ones) else {
                continue;
            };
            let rhs = &ones + (&q * &h) * 2.0;
            let Some(s) = lu.solve(&rhs) else {
                continue;
            };
            let px = 1.0 / g.neighbors(x).len() as f64;
            let (mut t1, mut t2) = (1.0, 0.0);
            for &j in g.neighbors(x) {
                let k = pos(j);
                t1 += px * h[k];
                t2 += px * (1.0 + 2.0 * h[k] + s[k]);
            }
            out[x] = (t2 - t1 * t1).max(0.0).sqrt();
        }
    }
    out
}

/// Return-time deviation min-max scaled inside the community; a constant
/// column maps to zeros.
pub fn second_order(g: &Digraph) -> Vec<f64> {
    min_max(return_time_std(g))
}

fn min_max(v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > STD_EPS) {
        return vec![0.0; v.len()];
    }
    v.into_iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// `trace(L^2) = sum_i s_i^2 + sum_{i != j} w_ij^2` over the weighted view,
/// optionally with one node deleted.
fn laplacian_energy(adj: &[Vec<(usize, f64)>], skip: Option<usize>) -> f64 {
    let mut e = 0.0;
    for (i, row) in adj.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let mut s = 0.0;
        for &(j, w) in row {
            if Some(j) != skip {
                s += w;
                e += w * w;
            }
        }
        e += s * s;
    }
    e
}

pub fn laplacian_centrality(g: &Digraph) -> Vec<f64> {
    let adj = g.undirected_weights();
    let total = laplacian_energy(&adj, None);
    if total == 0.0 {
        return vec![0.0; adj.len()];
    }
    (0..adj.len())
        .map(|v| (total - laplacian_energy(&adj, Some(v))) / total)
        .collect()
}

/// Burt constraint with proportional tie strengths `p_ij = w_ij / s_i`.
pub fn burt_constraint(g: &Digraph) -> Vec<f64> {
    let adj = g.undirected_weights();
    let strength: Vec<f64> = adj.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
    let p = |i: usize, j: usize| -> f64 {
        adj[i]
            .binary_search_by(|e| e.0.cmp(&j))
            .map(|k| adj[i][k].1 / strength[i])
            .unwrap_or(0.0)
    };
    (0..adj.len())
        .map(|i| {
            adj[i]
                .iter()
                .map(|&(j, w)| {
                    let direct = w / strength[i];
                    let indirect: f64 = adj[i]
                        .iter()
                        .filter(|&&(q, _)| q != j)
                        .map(|&(q, wq)| wq / strength[i] * p(q, j))
                        .sum();
                    (direct + indirect).powi(2)
                })
                .sum()
        })
        .collect()
}

/// Share of a node's incident directed edges whose reverse edge exists.
pub fn reciprocity(g: &Digraph) -> Vec<f64> {
    (0..g.node_count())
        .map(|x| {
            let deg = g.out_degree(x) + g.in_degree(x);
            if deg == 0 {
                return 0.0;
            }
            let mutual = g.successors(x).iter().filter(|&&y| g.has_edge(y, x)).count();
            (2 * mutual) as f64 / deg as f64
        })
        .collect()
}

/// All nine columns in canonical order.
pub fn feature_columns(g: &Digraph) -> [Vec<f64>; FEATURE_COUNT] {
    let (din, dout) = degree_features(g);
    [
        din,
        dout,
        closeness(g),
        betweenness(g),
        harmonic(g),
        second_order(g),
        laplacian_centrality(g),
        burt_constraint(g),
        reciprocity(g),
    ]
}

/// Zips columns into rows, rejecting ragged input and non-finite entries.
pub fn assemble(
    community: CommunityId,
    order: Vec<String>,
    columns: &[Vec<f64>; FEATURE_COUNT],
) -> Result<NodeFeatureMatrix> {
    let n = order.len();
    for (k, col) in columns.iter().enumerate() {
        if col.len() != n {
            return Err(Error::Shape(format!(
                "feature column {} has {} rows, expected {n}",
                FEATURE_NAMES[k],
                col.len()
            )));
        }
        if let Some(bad) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} of node {} in {community} is {}",
                FEATURE_NAMES[k], order[bad], col[bad]
            )));
        }
    }
    let rows = (0..n)
        .map(|i| std::array::from_fn(|k| columns[k][i]))
        .collect();
    Ok(NodeFeatureMatrix { community, order, rows })
}

/// Raw (unstandardized) features of a community graph.
pub fn community_features(community: CommunityId, g: &Digraph) -> Result<NodeFeatureMatrix> {
    assemble(community, g.ids().to_vec(), &feature_columns(g))
}

/// Per-column mean and scale of a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub version: u32,
    pub mean: [f64; FEATURE_COUNT],
    /// Population standard deviation, replaced by 1 when below `1e-12`.
    pub scale: [f64; FEATURE_COUNT],
}

impl TrainingStats {
    pub fn identity() -> Self {
        TrainingStats {
            version: FEATURE_VERSION,
            mean: [0.0; FEATURE_COUNT],
            scale: [1.0; FEATURE_COUNT],
        }
    }

    /// Statistics over every node row of `corpus`.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a NodeFeatureMatrix>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = [0.0; FEATURE_COUNT];
        let mut sq = [0.0; FEATURE_COUNT];
        let mats: Vec<&NodeFeatureMatrix> = corpus.into_iter().collect();
        for m in &mats {
            for r in &m.rows {
                count += 1;
                for k in 0..FEATURE_COUNT {
                    sum[k] += r[k];
                }
            }
        }
        if count == 0 {
            return Err(Error::Data("cannot fit feature statistics on zero rows".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        for m in &mats {
            for r in &m.rows {
                for k in 0..FEATURE_COUNT {
                    sq[k] += (r[k] - mean[k]).powi(2);
                }
            }
        }
        let scale = sq.map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < STD_EPS {
                1.0
            } else {
                sd
            }
        });
        Ok(TrainingStats {
            version: FEATURE_VERSION,
            mean,
            scale,
        })
    }

    pub fn standardize(&self, m: &NodeFeatureMatrix) -> NodeFeatureMatrix {
        let rows = m
            .rows
            .iter()
            .map(|r| std::array::from_fn(|k| (r[k] - self.mean[k]) / self.scale[k]))
            .collect();
        NodeFeatureMatrix { rows, ..m.clone() }
    }

    pub fn destandardize(&self, m: &NodeFeatureMatrix) -> NodeFeatureMatrix {
        let rows = m
            .rows
            .iter()
            .map(|r| std::array::from_fn(|k| r[k] * self.scale[k] + self.mean[k]))
            .collect();
        NodeFeatureMatrix { rows, ..m.clone() }
    }
}

/// Standardizes `corpus` in place. Without `stats` they are fitted on the
/// corpus itself (training); with `stats` those are applied unchanged.
pub fn assemble_and_standardize(
    corpus: &mut [NodeFeatureMatrix],
    stats: Option<&TrainingStats>,
) -> Result<TrainingStats> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => TrainingStats::fit(corpus.iter())?,
    };
    for m in corpus.iter_mut() {
        *m = stats.standardize(m);
    }
    Ok(stats)
}
