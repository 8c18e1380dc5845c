//! Louvain modularity optimization and community extraction per snapshot.
//!
//! Louvain runs on the symmetrized view of a snapshot: the weight between
//! two accounts is the total number of transactions in both directions.
//! Each level visits nodes in sorted-id order shuffled once by a seeded RNG;
//! a node moves only when some neighbor community strictly beats staying,
//! and equal-gain candidates resolve to the lowest community id. By default
//! each run ends with a node-level refinement pass and the best of several
//! seeded runs is kept.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::Digraph;
use crate::temporal::TemporalSnapshot;

const GAIN_EPS: f64 = 1e-12;

/// Stable community identifier: snapshot index and ordinal within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommunityId {
    pub snapshot: u64,
    pub ordinal: u32,
}

impl fmt::Display for CommunityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{:04}-c{:06}", self.snapshot, self.ordinal)
    }
}

impl FromStr for CommunityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Data(format!("bad community id `{s}`"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let snapshot = a.strip_prefix('s').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let ordinal = b.strip_prefix('c').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(CommunityId { snapshot, ordinal })
    }
}

impl Serialize for CommunityId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CommunityId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Induced subgraph of one Louvain cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Community {
    pub id: CommunityId,
    pub graph: Digraph,
}

impl Community {
    pub fn size(&self) -> usize {
        self.graph.node_count()
    }

    pub fn nodes(&self) -> &[String] {
        self.graph.ids()
    }
}

/// Node-to-community assignment with ids `0..count` numbered by first
/// appearance in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub count: usize,
    pub modularity: f64,
}

impl Partition {
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.count];
        for (node, &c) in self.assignment.iter().enumerate() {
            cells[c].push(node);
        }
        cells
    }
}

/// Undirected weighted graph of one Louvain level. `internal[i]` is the
/// adjacency mass already inside node `i` (twice its internal edge weight).
#[derive(Debug, Clone)]
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    internal: Vec<f64>,
}

impl LevelGraph {
    fn from_digraph(g: &Digraph) -> Self {
        LevelGraph {
            adj: g.undirected_weights(),
            internal: vec![0.0; g.node_count()],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn strength(&self, i: usize) -> f64 {
        self.internal[i] + self.adj[i].iter().map(|&(_, w)| w).sum::<f64>()
    }

    fn aggregate(&self, comm: &[usize], count: usize) -> LevelGraph {
        let mut internal = vec![0.0; count];
        let mut adj: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![Default::default(); count];
        for i in 0..self.len() {
            let ci = comm[i];
            internal[ci] += self.internal[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    internal[ci] += w;
                } else {
                    *adj[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        LevelGraph {
            adj: adj.into_iter().map(|m| m.into_iter().collect()).collect(),
            internal,
        }
    }
}

/// Renumbers `comm` by first appearance; returns the number of communities.
fn renumber(comm: &mut [usize]) -> usize {
    let mut map = vec![usize::MAX; comm.len()];
    let mut next = 0;
    for c in comm.iter_mut() {
        if map[*c] == usize::MAX {
            map[*c] = next;
            next += 1;
        }
        *c = map[*c];
    }
    next
}

/// Newman modularity of `assignment` on the symmetrized weighted view.
pub fn modularity(g: &Digraph, assignment: &[usize], resolution: f64) -> f64 {
    let adj = g.undirected_weights();
    let two_m: f64 = adj.iter().flatten().map(|&(_, w)| w).sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let count = assignment.iter().copied().max().map_or(0, |c| c + 1);
    let mut inside = vec![0.0; count];
    let mut total = vec![0.0; count];
    for (i, nb) in adj.iter().enumerate() {
        for &(j, w) in nb {
            total[assignment[i]] += w;
            if assignment[i] == assignment[j] {
                inside[assignment[i]] += w;
            }
        }
    }
    inside
        .iter()
        .zip(&total)
        .map(|(&a, &t)| a / two_m - resolution * (t / two_m).powi(2))
        .sum()
}

/// One local-moving phase. Returns whether any node changed community.
fn local_moving(
    g: &LevelGraph,
    comm: &mut [usize],
    order: &[usize],
    two_m: f64,
    resolution: f64,
) -> bool {
    let n = g.len();
    let strength: Vec<f64> = (0..n).map(|i| g.strength(i)).collect();
    let mut tot = vec![0.0; n];
    for i in 0..n {
        tot[comm[i]] += strength[i];
    }
    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut any = false;
    loop {
        let mut moved = false;
        for &i in order {
            let own = comm[i];
            let k = strength[i];
            for &(j, w) in &g.adj[i] {
                let c = comm[j];
                if link[c] == 0.0 {
                    touched.push(c);
                }
                link[c] += w;
            }
            tot[own] -= k;
            let gain = |c: usize, link: &[f64], tot: &[f64]| link[c] - resolution * tot[c] * k / two_m;
            let stay = gain(own, &link, &tot);
            touched.sort_unstable();
            // Ascending scan: an equal-gain candidate never displaces a lower id.
            let mut best = own;
            let mut best_gain = stay;
            for &c in &touched {
                let gc = gain(c, &link, &tot);
                if c != own && gc > best_gain + GAIN_EPS {
                    best = c;
                    best_gain = gc;
                }
            }
            tot[best] += k;
            if best != own {
                comm[i] = best;
                moved = true;
                any = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            touched.clear();
        }
        if !moved {
            return any;
        }
    }
}

/// Two-phase Louvain (local moving, then aggregation) until a level makes
/// no move. Deterministic for a fixed `seed` and node-id order.
pub fn louvain_partition(g: &Digraph, seed: u64, resolution: f64) -> Partition {
    louvain_with(g, seed, resolution, LouvainOptions::default())
}

/// Search effort knobs on top of plain two-phase Louvain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LouvainOptions {
    /// After the levels converge, move original nodes once more starting from
    /// the final partition and re-aggregate while that changes anything.
    pub refine: bool,
    /// Independent runs on distinct RNG streams; the highest modularity wins,
    /// earlier runs on ties.
    pub restarts: u32,
}

impl LouvainOptions {
    pub const PLAIN: LouvainOptions = LouvainOptions {
        refine: false,
        restarts: 1,
    };
}

impl Default for LouvainOptions {
    fn default() -> Self {
        LouvainOptions {
            refine: true,
            restarts: 8,
        }
    }
}

pub fn louvain_with(g: &Digraph, seed: u64, resolution: f64, opts: LouvainOptions) -> Partition {
    let mut best: Option<Partition> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(r));
        let p = louvain_once(g, &mut rng, resolution, opts.refine);
        if best.as_ref().is_none_or(|b| p.modularity > b.modularity + GAIN_EPS) {
            best = Some(p);
        }
    }
    best.expect("at least one run")
}

fn louvain_once(g: &Digraph, rng: &mut ChaCha8Rng, resolution: f64, refine: bool) -> Partition {
    let n = g.node_count();
    let base = LevelGraph::from_digraph(g);
    let two_m: f64 = (0..base.len()).map(|i| base.strength(i)).sum();
    let mut assignment: Vec<usize> = (0..n).collect();
    if two_m > 0.0 {
        let mut start: Vec<usize> = (0..n).collect();
        loop {
            let mut level = base.aggregate(&start, renumber(&mut start.clone()));
            let mut level_assign = start.clone();
            renumber(&mut level_assign);
            loop {
                let mut order: Vec<usize> = (0..level.len()).collect();
                order.shuffle(rng);
                let mut comm: Vec<usize> = (0..level.len()).collect();
                if !local_moving(&level, &mut comm, &order, two_m, resolution) {
                    break;
                }
                let count = renumber(&mut comm);
                for a in level_assign.iter_mut() {
                    *a = comm[*a];
                }
                if count == level.len() {
                    break;
                }
                level = level.aggregate(&comm, count);
            }
            assignment = level_assign;
            if !refine {
                break;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut comm = assignment.clone();
            if !local_moving(&base, &mut comm, &order, two_m, resolution) {
                break;
            }
            renumber(&mut comm);
            start = comm;
        }
    }
    let count = renumber(&mut assignment);
    let q = modularity(g, &assignment, resolution);
    Partition {
        assignment,
        count,
        modularity: q,
    }
}

/// Retained communities of one snapshot plus the size-filter census.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub retained: Vec<Community>,
    /// Cells found by Louvain before the size filter.
    pub raw_count: usize,
    pub dropped: usize,
    pub modularity: f64,
}

/// Partitions a snapshot and keeps cells with at least `min_size` nodes.
pub fn extract_communities(
    tts: &TemporalSnapshot,
    min_size: usize,
    seed: u64,
    resolution: f64,
) -> Extraction {
    let g = &tts.graph.simple;
    if g.is_empty() {
        return Extraction {
            retained: Vec::new(),
            raw_count: 0,
            dropped: 0,
            modularity: 0.0,
        };
    }
    let partition = louvain_partition(g, seed, resolution);
    let cells = partition.cells();
    let raw_count = cells.len();
    let retained: Vec<Community> = cells
        .iter()
        .enumerate()
        .filter(|(_, cell)| cell.len() >= min_size)
        .map(|(ordinal, cell)| Community {
            id: CommunityId {
                snapshot: tts.index,
                ordinal: ordinal as u32,
            },
            graph: g.induced(cell),
        })
        .collect();
    Extraction {
        dropped: raw_count - retained.len(),
        raw_count,
        retained,
        modularity: partition.modularity,
    }
}
