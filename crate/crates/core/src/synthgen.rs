//! Deterministic transaction corpora with planted pattern instances.
//!
//! Each planted component uses fresh accounts, so components are node
//! disjoint and the oracle maps every component to exactly one pattern.
//! Noise consists of tiny (two or three node) components that the
//! community size filter removes downstream.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::Pattern;
use crate::ingest::{write_transactions_to, ColumnMapping, Transaction};

/// Size parameters of one planted pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `fan_in` senders into one collector.
    Collector { fan_in: usize },
    /// One sender spreading to `fan_out` recipients.
    Sink { fan_out: usize },
    /// `colluders` senders that all fund the same `shared` recipients.
    Collusion { colluders: usize, shared: usize },
    /// A root funding `width` nodes that each split into two fresh nodes.
    Branching { width: usize },
    /// Root to `intermediaries` nodes that all forward to one gatherer.
    ScatterGather { intermediaries: usize },
    /// `fan` senders into a proxy that forwards to `fan` recipients.
    GatherScatter { fan: usize },
}

impl Shape {
    pub fn pattern(&self) -> Pattern {
        match self {
            Shape::Collector { .. } => Pattern::Collector,
            Shape::Sink { .. } => Pattern::Sink,
            Shape::Collusion { .. } => Pattern::Collusion,
            Shape::Branching { .. } => Pattern::Branching,
            Shape::ScatterGather { .. } => Pattern::ScatterGather,
            Shape::GatherScatter { .. } => Pattern::GatherScatter,
        }
    }

    /// Rejects sizes for which the component would be smaller than four
    /// nodes or would not score its own indicator.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidTemplate(format!("{self:?}: {msg}")))
            }
        };
        match *self {
            Shape::Collector { fan_in } => check(fan_in >= 3, "fan_in must be at least 3"),
            Shape::Sink { fan_out } => check(fan_out >= 3, "fan_out must be at least 3"),
            Shape::Collusion { colluders, shared } => check(
                colluders >= 2 && shared >= 2,
                "needs at least 2 colluders sharing at least 2 recipients",
            ),
            Shape::Branching { width } => check(width >= 2, "width must be at least 2"),
            Shape::ScatterGather { intermediaries } => {
                check(intermediaries >= 3, "intermediaries must be at least 3")
            }
            Shape::GatherScatter { fan } => check(fan >= 3, "fan must be at least 3"),
        }
    }

    /// `(nodes, edges)` of the generated component.
    pub fn size(&self) -> (usize, usize) {
        match *self {
            Shape::Collector { fan_in: n } | Shape::Sink { fan_out: n } => (n + 1, n),
            Shape::Collusion { colluders, shared } => (colluders + shared, colluders * shared),
            Shape::Branching { width } => (1 + 3 * width, 3 * width),
            Shape::ScatterGather { intermediaries: n } => (n + 2, 2 * n),
            Shape::GatherScatter { fan } => (2 * fan + 1, 2 * fan),
        }
    }
}

/// A shape placed in the time window `[window_start, window_start + jitter)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTemplate {
    pub shape: Shape,
    pub window_start: i64,
    /// Width in seconds of the window timestamps are drawn from.
    pub jitter: i64,
}

/// Hands out fresh, zero-padded account ids so that lexical order matches
/// creation order.
#[derive(Debug, Clone, Default)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        IdAllocator { next }
    }

    pub fn fresh(&mut self) -> String {
        let id = format!("A{:09}", self.next);
        self.next += 1;
        id
    }
}

/// Emits exactly the defining edge set of `template` over fresh accounts.
pub fn generate_pattern(
    template: &PatternTemplate,
    ids: &mut IdAllocator,
    seed: u64,
) -> Result<(Vec<Transaction>, BTreeSet<String>)> {
    template.shape.validate()?;
    if template.jitter <= 0 {
        return Err(Error::InvalidTemplate("jitter must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = |k: usize| (0..k).map(|_| ids.fresh()).collect::<Vec<_>>();
    let mut pairs: Vec<(String, String)> = Vec::new();
    match template.shape {
        Shape::Collector { fan_in } => {
            let hub = ids_one(&mut fresh);
            for v in fresh(fan_in) {
                pairs.push((v, hub.clone()));
            }
        }
        Shape::Sink { fan_out } => {
            let hub = ids_one(&mut fresh);
            for v in fresh(fan_out) {
                pairs.push((hub.clone(), v));
            }
        }
        Shape::Collusion { colluders, shared } => {
            let senders = fresh(colluders);
            let recipients = fresh(shared);
            for s in &senders {
                for r in &recipients {
                    pairs.push((s.clone(), r.clone()));
                }
            }
        }
        Shape::Branching { width } => {
            let root = ids_one(&mut fresh);
            for v in fresh(width) {
                pairs.push((root.clone(), v.clone()));
                for leaf in fresh(2) {
                    pairs.push((v.clone(), leaf));
                }
            }
        }
        Shape::ScatterGather { intermediaries } => {
            let root = ids_one(&mut fresh);
            let mids = fresh(intermediaries);
            let sink = ids_one(&mut fresh);
            for v in mids {
                pairs.push((root.clone(), v.clone()));
                pairs.push((v, sink.clone()));
            }
        }
        Shape::GatherScatter { fan } => {
            let proxy = ids_one(&mut fresh);
            for v in fresh(fan) {
                pairs.push((v, proxy.clone()));
            }
            for u in fresh(fan) {
                pairs.push((proxy.clone(), u));
            }
        }
    }
    let mut nodes = BTreeSet::new();
    let txs = pairs
        .into_iter()
        .map(|(sender, receiver)| {
            nodes.insert(sender.clone());
            nodes.insert(receiver.clone());
            Transaction {
                sender,
                receiver,
                timestamp: template.window_start + rng.gen_range(0..template.jitter),
                source_row: 0,
            }
        })
        .collect();
    Ok((txs, nodes))
}

fn ids_one(fresh: &mut impl FnMut(usize) -> Vec<String>) -> String {
    fresh(1).pop().expect("one id")
}

/// One planted component and its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub component: usize,
    pub pattern: Pattern,
    pub shape: Shape,
    pub window_start: i64,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCorpus {
    /// Sorted by `(timestamp, sender, receiver)`; `source_row` is the position.
    pub transactions: Vec<Transaction>,
    pub oracle: Vec<OracleEntry>,
    pub seed: u64,
}

impl SynthCorpus {
    /// Writes the transactions in the input layout `mapping` describes.
    pub fn write_transactions(&self, path: &Path, mapping: &ColumnMapping) -> Result<()> {
        let mut buf = Vec::new();
        write_transactions_to(&mut buf, &self.transactions, mapping)?;
        write_file(path, &buf)
    }

    /// Sidecar ground truth: component id, pattern, node list.
    pub fn write_oracle(&self, path: &Path) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(&self.oracle)?;
        buf.push(b'\n');
        write_file(path, &buf)
    }

    pub fn read_oracle(path: &Path) -> Result<Vec<OracleEntry>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Per-item seed derived from the corpus seed, so templates are independent.
fn item_seed(seed: u64, item: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item + 1);
    rng.gen()
}

/// Plants every template (in order) plus `noise_edges` edges of tiny noise.
///
/// Noise components get between one and two edges over two or three fresh
/// accounts, placed in a random template window (or at `noise_window`
/// when there are no templates).
pub fn generate_corpus(
    templates: &[PatternTemplate],
    noise_edges: usize,
    noise_window: (i64, i64),
    seed: u64,
) -> Result<SynthCorpus> {
    let mut ids = IdAllocator::default();
    let mut transactions = Vec::new();
    let mut oracle = Vec::with_capacity(templates.len());
    for (k, t) in templates.iter().enumerate() {
        let (txs, nodes) = generate_pattern(t, &mut ids, item_seed(seed, k as u64))?;
        transactions.extend(txs);
        oracle.push(OracleEntry {
            component: k,
            pattern: t.shape.pattern(),
            shape: t.shape,
            window_start: t.window_start,
            nodes: nodes.into_iter().collect(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, u64::MAX - 1));
    let mut remaining = noise_edges;
    while remaining > 0 {
        let (start, width) = if templates.is_empty() {
            noise_window
        } else {
            let t = &templates[rng.gen_range(0..templates.len())];
            (t.window_start, t.jitter)
        };
        let width = width.max(1);
        let a = ids.fresh();
        let b = ids.fresh();
        let mut stamp = || start + rng.gen_range(0..width);
        transactions.push(noise_tx(&a, &b, stamp()));
        remaining -= 1;
        if remaining > 0 && rng.gen_bool(0.5) {
            let c = ids.fresh();
            transactions.push(noise_tx(&b, &c, start + rng.gen_range(0..width)));
            remaining -= 1;
        }
    }

    transactions.sort_by(|a, b| {
        (a.timestamp, &a.sender, &a.receiver).cmp(&(b.timestamp, &b.sender, &b.receiver))
    });
    for (i, t) in transactions.iter_mut().enumerate() {
        t.source_row = i;
    }
    Ok(SynthCorpus {
        transactions,
        oracle,
        seed,
    })
}

fn noise_tx(a: &str, b: &str, timestamp: i64) -> Transaction {
    Transaction {
        sender: a.to_string(),
        receiver: b.to_string(),
        timestamp,
        source_row: 0,
    }
}

/// Size ranges for randomized desk-scale corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPlan {
    pub per_pattern: usize,
    /// Number of consecutive windows the components are spread over.
    pub windows: usize,
    pub window_secs: i64,
    /// First window start, UTC seconds.
    pub start: i64,
    pub noise_edges: usize,
    /// Inclusive size ranges.
    pub star_fan: (usize, usize),
    pub colluders: (usize, usize),
    pub shared: (usize, usize),
    pub branching_width: (usize, usize),
    pub intermediaries: (usize, usize),
    pub proxy_fan: (usize, usize),
}

impl Default for CorpusPlan {
    fn default() -> Self {
        CorpusPlan {
            per_pattern: 600,
            windows: 4,
            window_secs: 7 * 86_400,
            // 2022-10-03T00:00:00Z
            start: 1_664_755_200,
            noise_edges: 400,
            star_fan: (3, 8),
            colluders: (2, 3),
            shared: (2, 4),
            branching_width: (2, 4),
            intermediaries: (3, 6),
            proxy_fan: (3, 5),
        }
    }
}

impl CorpusPlan {
    /// Randomized templates, `per_pattern` of each pattern, interleaved in
    /// pattern order and spread round-robin over the windows.
    pub fn templates(&self, seed: u64) -> Result<Vec<PatternTemplate>> {
        if self.windows == 0 || self.window_secs <= 0 {
            return Err(Error::Config("corpus needs at least one positive-width window".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |(lo, hi): (usize, usize)| rng.gen_range(lo..=hi.max(lo));
        let mut out = Vec::with_capacity(self.per_pattern * 6);
        for i in 0..self.per_pattern {
            for p in Pattern::ALL {
                let shape = match p {
                    Pattern::Collector => Shape::Collector { fan_in: pick(self.star_fan) },
                    Pattern::Sink => Shape::Sink { fan_out: pick(self.star_fan) },
                    Pattern::Collusion => Shape::Collusion {
                        colluders: pick(self.colluders),
                        shared: pick(self.shared),
                    },
                    Pattern::Branching => Shape::Branching { width: pick(self.branching_width) },
                    Pattern::ScatterGather => Shape::ScatterGather {
                        intermediaries: pick(self.intermediaries),
                    },
                    Pattern::GatherScatter => Shape::GatherScatter { fan: pick(self.proxy_fan) },
                };
                shape.validate()?;
                let window = (i * 6 + p.index()) % self.windows;
                out.push(PatternTemplate {
                    shape,
                    window_start: self.start + window as i64 * self.window_secs,
                    jitter: self.window_secs,
                });
            }
        }
        Ok(out)
    }

    pub fn generate(&self, seed: u64) -> Result<SynthCorpus> {
        let templates = self.templates(seed)?;
        generate_corpus(&templates, self.noise_edges, (self.start, self.window_secs), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Digraph;
    use crate::indicators::label_community;
    use crate::ingest::{build_graph, load_transactions};

    fn template(shape: Shape) -> PatternTemplate {
        PatternTemplate {
            shape,
            window_start: 1000,
            jitter: 500,
        }
    }

    fn component(shape: Shape) -> Digraph {
        let (txs, _) = generate_pattern(&template(shape), &mut IdAllocator::default(), 3).unwrap();
        build_graph(&txs).simple
    }

    #[test]
    fn collector_has_one_hub() {
        let g = component(Shape::Collector { fan_in: 5 });
        assert_eq!(g.edge_count(), 5);
        let hub = (0..g.node_count()).find(|&i| g.in_degree(i) == 5).unwrap();
        assert_eq!(g.out_degree(hub), 0);
    }

    #[test]
    fn scatter_gather_and_branching_sizes() {
        let g = component(Shape::ScatterGather { intermediaries: 3 });
        assert_eq!((g.node_count(), g.edge_count()), (5, 6));
        let g = component(Shape::Branching { width: 3 });
        assert_eq!((g.node_count(), g.edge_count()), (10, 9));
        for shape in [
            Shape::Collusion { colluders: 3, shared: 4 },
            Shape::GatherScatter { fan: 4 },
            Shape::Sink { fan_out: 6 },
        ] {
            let g = component(shape);
            assert_eq!((g.node_count(), g.edge_count()), shape.size());
        }
    }

    #[test]
    fn undersized_templates_are_rejected() {
        for shape in [
            Shape::Collector { fan_in: 2 },
            Shape::Collusion { colluders: 1, shared: 3 },
            Shape::Branching { width: 1 },
            Shape::ScatterGather { intermediaries: 2 },
            Shape::GatherScatter { fan: 2 },
        ] {
            let err = generate_pattern(&template(shape), &mut IdAllocator::default(), 0).unwrap_err();
            assert!(matches!(err, Error::InvalidTemplate(_)));
        }
    }

    #[test]
    fn timestamps_stay_in_window() {
        let (txs, _) = generate_pattern(
            &template(Shape::GatherScatter { fan: 5 }),
            &mut IdAllocator::default(),
            9,
        )
        .unwrap();
        assert!(txs.iter().all(|t| (1000..1500).contains(&t.timestamp)));
    }

    #[test]
    fn every_template_gets_its_own_label() {
        let plan = CorpusPlan {
            per_pattern: 40,
            ..CorpusPlan::default()
        };
        for (k, t) in plan.templates(11).unwrap().iter().enumerate() {
            let (txs, _) = generate_pattern(t, &mut IdAllocator::default(), k as u64).unwrap();
            let label = label_community(&build_graph(&txs).simple);
            assert_eq!(label.pattern, Some(t.shape.pattern()), "{:?}", t.shape);
        }
    }

    #[test]
    fn noise_only_corpus_has_empty_oracle() {
        let c = generate_corpus(&[], 10, (0, 100), 1).unwrap();
        assert!(c.oracle.is_empty());
        assert_eq!(c.transactions.len(), 10);
        let g = build_graph(&c.transactions);
        assert!(g.simple.weak_components().iter().all(|c| c.len() < 4));
    }

    #[test]
    fn same_seed_same_bytes() {
        let plan = CorpusPlan {
            per_pattern: 1,
            ..CorpusPlan::default()
        };
        let bytes = |seed| {
            let c = plan.generate(seed).unwrap();
            let mut buf = Vec::new();
            write_transactions_to(&mut buf, &c.transactions, &ColumnMapping::default()).unwrap();
            buf.extend(serde_json::to_vec(&c.oracle).unwrap());
            buf
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn oracle_components_are_disjoint() {
        let c = CorpusPlan {
            per_pattern: 20,
            ..CorpusPlan::default()
        }
        .generate(5)
        .unwrap();
        let mut seen = BTreeSet::new();
        for e in &c.oracle {
            for n in &e.nodes {
                assert!(seen.insert(n.clone()));
            }
        }
    }

    #[test]
    fn generated_file_round_trips_through_loader() {
        let c = generate_corpus(
            &[
                template(Shape::Sink { fan_out: 40 }),
                template(Shape::Collusion { colluders: 6, shared: 10 }),
            ],
            0,
            (0, 1),
            2,
        )
        .unwrap();
        assert_eq!(c.transactions.len(), 100);
        let f = tempfile::NamedTempFile::new().unwrap();
        c.write_transactions(f.path(), &ColumnMapping::default()).unwrap();
        let (back, report) = load_transactions(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(report.rows_read, 100);
        assert_eq!(back, c.transactions);
    }

    #[test]
    fn planted_sink_degrees() {
        let c = generate_corpus(&[template(Shape::Sink { fan_out: 5 })], 0, (0, 1), 4).unwrap();
        let g = build_graph(&c.transactions).simple;
        let hub = g.index_of(&c.oracle[0].nodes[0]).unwrap();
        assert_eq!(g.out_degree(hub), 5);
        for spoke in &c.oracle[0].nodes[1..] {
            assert_eq!(g.in_degree(g.index_of(spoke).unwrap()), 1);
        }
    }
}
