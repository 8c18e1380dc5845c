//! Stage-wise pipeline over persisted, hash-checked artifacts.
//!
//! Each stage writes into `<output_dir>/<stage>/` through a temporary
//! directory that is renamed into place once complete. `manifest.json`
//! records the stage fingerprint (a hash of the stage's own configuration
//! section, its seed, external inputs and upstream fingerprints) and the
//! sha256 of every artifact. A stage refuses upstream artifacts whose
//! manifest is missing, whose fingerprint disagrees with the current
//! configuration, or whose files no longer match their hashes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::community::{extract_communities, Community, CommunityId};
use crate::dataset::{build_pattern_sets, prepare_capped, TrainValSplit, TRAIN_TARGET};
use crate::error::{Error, Result};
use crate::evalreport::{bundle_files, cross_evaluate, parse_bundle, select_best};
use crate::features::{community_features, NodeFeatureMatrix, FEATURE_COUNT, FEATURE_NAMES, FEATURE_VERSION};
use crate::gae::{self, GaeModel, GraphInput, TrainConfig, Variant};
use crate::graph::Digraph;
use crate::indicators::{label_community, Pattern, PatternLabel};
use crate::ingest::{build_graph, load_transactions, write_transactions_to, ColumnMapping};
use crate::synthgen::CorpusPlan;
use crate::temporal::{dissect, Resolution, TemporalSnapshot};

/// Bumped whenever an artifact layout changes.
pub const ARTIFACT_FORMAT: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seeds: SeedConfig,
    pub input: InputConfig,
    pub synth: CorpusPlan,
    pub dissect: DissectConfig,
    pub communities: CommunityConfig,
    pub datasets: DatasetConfig,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("txpattern-out"),
            seeds: SeedConfig::default(),
            input: InputConfig::default(),
            synth: CorpusPlan::default(),
            dissect: DissectConfig::default(),
            communities: CommunityConfig::default(),
            datasets: DatasetConfig::default(),
            train: TrainSection::default(),
        }
    }
}

/// Master seed plus optional per-stage overrides. Stage seeds not given
/// explicitly are derived from the master seed and the stage name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
    pub synth: Option<u64>,
    pub communities: Option<u64>,
    pub datasets: Option<u64>,
    pub train: Option<u64>,
}

impl SeedConfig {
    /// Seed of a stage that consumes randomness, `None` for the others.
    pub fn stage_seed(&self, stage: Stage) -> Option<u64> {
        let explicit = match stage {
            Stage::Synth => self.synth,
            Stage::Communities => self.communities,
            Stage::Datasets => self.datasets,
            Stage::Train => self.train,
            _ => return None,
        };
        Some(explicit.unwrap_or_else(|| labeled_seed(self.master, stage.name())))
    }
}

/// Deterministic child seed: the first 8 bytes of
/// `sha256("txpattern-seed" 0 label 0 parent_le)`.
pub fn labeled_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"txpattern-seed\0");
    h.update(label.as_bytes());
    h.update(b"\0");
    h.update(parent.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Transaction source. Without `path` the `synth` stage provides the corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DissectConfig {
    pub rho: Resolution,
    /// Start of window 0 in UTC seconds; midnight of the earliest day if unset.
    pub origin: Option<i64>,
}

impl Default for DissectConfig {
    fn default() -> Self {
        DissectConfig {
            rho: Resolution::WEEK,
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunityConfig {
    pub min_size: usize,
    pub resolution: f64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        CommunityConfig {
            min_size: 4,
            resolution: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_target: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_target: TRAIN_TARGET,
        }
    }
}

/// Which models to train and how. The per-model seed is derived from the
/// train stage seed, so `hyper.seed` must stay 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variants: Vec<Variant>,
    pub patterns: Vec<Pattern>,
    pub hyper: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            variants: Variant::ALL.to_vec(),
            patterns: Pattern::ALL.to_vec(),
            hyper: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = cfg.input.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty");
        }
        if self.communities.min_size < 2 {
            return bad("communities.min_size must be at least 2");
        }
        if !(self.communities.resolution > 0.0 && self.communities.resolution.is_finite()) {
            return bad("communities.resolution must be positive");
        }
        if self.datasets.train_target == 0 {
            return bad("datasets.train_target must be positive");
        }
        if self.train.hyper.seed != 0 {
            return bad("train.hyper.seed is derived per model; set seeds.train instead");
        }
        if self.train.variants.is_empty() || self.train.patterns.is_empty() {
            return bad("train.variants and train.patterns must not be empty");
        }
        let variants: BTreeSet<_> = self.train.variants.iter().collect();
        let patterns: BTreeSet<_> = self.train.patterns.iter().collect();
        if variants.len() != self.train.variants.len() || patterns.len() != self.train.patterns.len() {
            return bad("train.variants and train.patterns must not repeat entries");
        }
        self.train.hyper.validate()
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.output_dir.join(stage.name())
    }

    fn synthetic(&self) -> bool {
        self.input.path.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Dissect,
    Communities,
    Label,
    Features,
    Datasets,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Dissect,
        Stage::Communities,
        Stage::Label,
        Stage::Features,
        Stage::Datasets,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Dissect => "dissect",
            Stage::Communities => "communities",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Datasets => "datasets",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn dependencies(self, cfg: &PipelineConfig) -> Vec<Stage> {
        use Stage::*;
        match self {
            Synth => vec![],
            Ingest if cfg.synthetic() => vec![Synth],
            Ingest => vec![],
            Dissect => vec![Ingest],
            Communities => vec![Dissect],
            Label => vec![Communities],
            Features => vec![Communities, Label],
            Datasets => vec![Label],
            Train => vec![Communities, Features, Datasets],
            Evaluate => vec![Communities, Features, Datasets, Train],
            Report => vec![Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub format: u32,
    pub fingerprint: String,
    pub seed: Option<u64>,
    /// The stage's own configuration section.
    pub config: serde_json::Value,
    pub upstream: BTreeMap<String, String>,
    /// sha256 of files read from outside the pipeline tree.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every artifact, keyed by path relative to the stage dir.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn section(stage: Stage, cfg: &PipelineConfig) -> Result<serde_json::Value> {
    use serde_json::json;
    let v = match stage {
        Stage::Synth => json!({ "plan": cfg.synth, "columns": cfg.input.columns }),
        Stage::Ingest => json!({ "columns": cfg.input.columns, "synthetic": cfg.synthetic() }),
        Stage::Dissect => serde_json::to_value(&cfg.dissect)?,
        Stage::Communities => serde_json::to_value(&cfg.communities)?,
        Stage::Label => json!({}),
        Stage::Features => json!({ "version": FEATURE_VERSION, "names": FEATURE_NAMES }),
        Stage::Datasets => serde_json::to_value(&cfg.datasets)?,
        Stage::Train => serde_json::to_value(&cfg.train.hyper)?,
        Stage::Evaluate | Stage::Report => json!({}),
    };
    Ok(v)
}

fn external_inputs(stage: Stage, cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    if let (Stage::Ingest, Some(p)) = (stage, &cfg.input.path) {
        m.insert("input".to_string(), hash_file(p)?);
    }
    Ok(m)
}

/// Fingerprints of every stage up to and including `upto`, as implied by
/// the configuration (and the external input file) alone.
pub fn fingerprints(cfg: &PipelineConfig, upto: Stage) -> Result<BTreeMap<Stage, String>> {
    let mut out: BTreeMap<Stage, String> = BTreeMap::new();
    for stage in Stage::ALL.into_iter().filter(|s| *s <= upto) {
        let upstream: BTreeMap<&str, &String> = stage
            .dependencies(cfg)
            .into_iter()
            .map(|d| (d.name(), &out[&d]))
            .collect();
        let doc = serde_json::json!({
            "stage": stage.name(),
            "format": ARTIFACT_FORMAT,
            "config": section(stage, cfg)?,
            "seed": cfg.seeds.stage_seed(stage),
            "upstream": upstream,
            "inputs": external_inputs(stage, cfg)?,
        });
        let fp = sha256_hex(&serde_json::to_vec(&doc)?);
        out.insert(stage, fp);
    }
    Ok(out)
}

/// Checks an upstream stage's manifest against the expected fingerprint
/// and every artifact against its recorded hash.
pub fn verify_stage(requester: Stage, dep: Stage, dir: &Path, expected: &str) -> Result<Manifest> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::MissingPrerequisite {
            stage: requester.name().into(),
            missing: dep.name().into(),
        });
    }
    let m = Manifest::read(dir)?;
    if m.fingerprint != expected || m.stage != dep.name() {
        return Err(Error::ConfigMismatch {
            stage: requester.name().into(),
            upstream: dep.name().into(),
        });
    }
    verify_outputs(dir, &m)?;
    Ok(m)
}

fn verify_outputs(dir: &Path, m: &Manifest) -> Result<()> {
    for (rel, want) in &m.outputs {
        let path = dir.join(rel);
        let got = fs::read(&path).map(|b| sha256_hex(&b));
        if got.as_deref().ok() != Some(want.as_str()) {
            return Err(Error::Tampered { path });
        }
    }
    Ok(())
}

/// Collects a stage's files in a temporary sibling directory and moves it
/// into place on commit. Dropped uncommitted, it removes its directory.
struct StageWriter {
    tmp: PathBuf,
    outputs: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    committed: bool,
}

impl StageWriter {
    fn create(dest: &Path) -> Result<Self> {
        let parent = dest.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dest
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "stage".into());
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(StageWriter {
            tmp,
            outputs: BTreeMap::new(),
            inputs: BTreeMap::new(),
            committed: false,
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.tmp.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn commit(mut self, manifest: &Manifest, resolved: &str, dest: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        let mpath = self.tmp.join(MANIFEST_FILE);
        fs::write(&mpath, bytes).map_err(|e| Error::io(&mpath, e))?;
        let cpath = self.tmp.join(RESOLVED_CONFIG_FILE);
        fs::write(&cpath, resolved).map_err(|e| Error::io(&cpath, e))?;
        let old = self.tmp.with_extension("old");
        if dest.exists() {
            fs::rename(dest, &old).map_err(|e| Error::io(dest, e))?;
        }
        fs::rename(&self.tmp, dest).map_err(|e| Error::io(dest, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Runtime knobs that do not affect artifact contents.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 and 1 both mean single-threaded.
    pub jobs: usize,
    /// `evaluate`: read models from here instead of the train stage.
    pub models_dir: Option<PathBuf>,
    /// `evaluate`: write the bundle here instead of the stage directory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub fingerprint: String,
    pub files: usize,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    opts: &'a RunOptions,
    seed: Option<u64>,
    fingerprint: &'a str,
    pool: rayon::ThreadPool,
}

impl Ctx<'_> {
    fn dir(&self, s: Stage) -> PathBuf {
        self.cfg.stage_dir(s)
    }

    fn seed(&self) -> u64 {
        self.seed.expect("seeded stage")
    }
}

/// Runs one stage after validating its prerequisites.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let fps = fingerprints(cfg, stage)?;
    let mut upstream = BTreeMap::new();
    for dep in stage.dependencies(cfg) {
        if stage == Stage::Evaluate && dep == Stage::Train && opts.models_dir.is_some() {
            continue;
        }
        verify_stage(stage, dep, &cfg.stage_dir(dep), &fps[&dep])?;
        upstream.insert(dep.name().to_string(), fps[&dep].clone());
    }
    let dest = match (stage, &opts.out_dir) {
        (Stage::Evaluate, Some(d)) => d.clone(),
        _ => cfg.stage_dir(stage),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        cfg,
        opts,
        seed: cfg.seeds.stage_seed(stage),
        fingerprint: &fps[&stage],
        pool,
    };
    let mut w = StageWriter::create(&dest)?;
    w.inputs = external_inputs(stage, cfg)?;
    match stage {
        Stage::Synth => run_synth(&ctx, &mut w),
        Stage::Ingest => run_ingest(&ctx, &mut w),
        Stage::Dissect => run_dissect(&ctx, &mut w),
        Stage::Communities => run_communities(&ctx, &mut w),
        Stage::Label => run_label(&ctx, &mut w),
        Stage::Features => run_features(&ctx, &mut w),
        Stage::Datasets => run_datasets(&ctx, &mut w),
        Stage::Train => run_train(&ctx, &mut w, &dest),
        Stage::Evaluate => run_evaluate(&ctx, &mut w),
        Stage::Report => run_report(&ctx, &mut w),
    }?;
    let manifest = Manifest {
        stage: stage.name().into(),
        format: ARTIFACT_FORMAT,
        fingerprint: fps[&stage].clone(),
        seed: ctx.seed,
        config: section(stage, cfg)?,
        upstream,
        inputs: w.inputs.clone(),
        outputs: w.outputs.clone(),
    };
    let files = manifest.outputs.len();
    w.commit(&manifest, &cfg.to_toml()?, &dest)?;
    Ok(StageOutcome {
        stage,
        dir: dest,
        fingerprint: manifest.fingerprint,
        files,
    })
}

/// Stages `run_all` would execute, in order. `synth` is skipped when the
/// configuration names an input file.
pub fn plan(cfg: &PipelineConfig, from: Option<Stage>) -> Result<Vec<Stage>> {
    let stages: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|s| *s != Stage::Synth || cfg.synthetic())
        .collect();
    match from {
        None => Ok(stages),
        Some(f) => {
            let start = stages.iter().position(|s| *s == f).ok_or_else(|| {
                Error::Config(format!("stage `{f}` is not part of this pipeline (input file given)"))
            })?;
            Ok(stages[start..].to_vec())
        }
    }
}

/// Runs the planned stages in order, stopping at the first failure with
/// the failing stage named in the error.
pub fn run_all(
    cfg: &PipelineConfig,
    from: Option<Stage>,
    opts: &RunOptions,
) -> Result<Vec<StageOutcome>> {
    let mut done = Vec::new();
    for stage in plan(cfg, from)? {
        let outcome = run_stage(stage, cfg, opts).map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })?;
        done.push(outcome);
    }
    Ok(done)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn transactions_csv(txs: &[crate::ingest::Transaction], mapping: &ColumnMapping) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_transactions_to(&mut buf, txs, mapping)?;
    Ok(buf)
}

fn run_synth(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let corpus = ctx.cfg.synth.generate(ctx.seed())?;
    w.write(
        "transactions.csv",
        &transactions_csv(&corpus.transactions, &ctx.cfg.input.columns)?,
    )?;
    w.write_json("oracle.json", &corpus.oracle)
}

fn run_ingest(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let src = match &ctx.cfg.input.path {
        Some(p) => p.clone(),
        None => ctx.dir(Stage::Synth).join("transactions.csv"),
    };
    let (txs, report) = load_transactions(&src, &ctx.cfg.input.columns)?;
    w.write(
        "transactions.csv",
        &transactions_csv(&txs, &ColumnMapping::canonical())?,
    )?;
    w.write_json("load_report.json", &report)
}

/// One entry of the dissect index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub index: u64,
    pub start: i64,
    pub end: i64,
    pub transactions: usize,
    pub nodes: usize,
    pub edges: usize,
    pub file: String,
}

fn run_dissect(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let path = ctx.dir(Stage::Ingest).join("transactions.csv");
    let (txs, _) = load_transactions(&path, &ColumnMapping::canonical())?;
    let snaps = dissect(&txs, ctx.cfg.dissect.rho, ctx.cfg.dissect.origin)?;
    let mut index = Vec::with_capacity(snaps.len());
    for s in &snaps {
        let file = format!("windows/w{:06}.csv", s.index);
        w.write(&file, &transactions_csv(&s.transactions, &ColumnMapping::canonical())?)?;
        index.push(WindowEntry {
            index: s.index,
            start: s.start,
            end: s.end,
            transactions: s.transactions.len(),
            nodes: s.graph.node_count(),
            edges: s.graph.simple.edge_count(),
            file,
        });
    }
    w.write_json("index.json", &index)
}

/// Reads the snapshots persisted by the dissect stage.
pub fn load_snapshots(dir: &Path) -> Result<Vec<TemporalSnapshot>> {
    let index: Vec<WindowEntry> = read_json(&dir.join("index.json"))?;
    index
        .into_iter()
        .map(|e| {
            let (transactions, _) = load_transactions(&dir.join(&e.file), &ColumnMapping::canonical())?;
            Ok(TemporalSnapshot {
                index: e.index,
                start: e.start,
                end: e.end,
                graph: build_graph(&transactions),
                transactions,
            })
        })
        .collect()
}

/// One entry of the community manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityEntry {
    pub id: CommunityId,
    pub snapshot: u64,
    pub size: usize,
    pub nodes: Vec<String>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub snapshot: u64,
    pub nodes: usize,
    pub raw: usize,
    pub dropped: usize,
    pub retained: usize,
    pub modularity: f64,
}

fn edge_list_csv(g: &Digraph) -> String {
    let mut s = String::from("sender,receiver,weight\n");
    for &(a, b, wgt) in g.edges() {
        s.push_str(&format!("{},{},{wgt}\n", g.id(a), g.id(b)));
    }
    s
}

fn run_communities(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let snaps = load_snapshots(&ctx.dir(Stage::Dissect))?;
    let cc = &ctx.cfg.communities;
    let seed = ctx.seed();
    let extractions: Vec<_> = ctx.pool.install(|| {
        snaps
            .par_iter()
            .map(|s| {
                let sub = labeled_seed(seed, &format!("snapshot/{}", s.index));
                extract_communities(s, cc.min_size, sub, cc.resolution)
            })
            .collect()
    });
    let mut index = Vec::new();
    let mut census = Vec::new();
    for (s, ex) in snaps.iter().zip(&extractions) {
        for c in &ex.retained {
            let file = format!("edges/{}.csv", c.id);
            w.write(&file, edge_list_csv(&c.graph).as_bytes())?;
            index.push(CommunityEntry {
                id: c.id,
                snapshot: c.id.snapshot,
                size: c.size(),
                nodes: c.nodes().to_vec(),
                file,
            });
        }
        census.push(CensusEntry {
            snapshot: s.index,
            nodes: s.graph.node_count(),
            raw: ex.raw_count,
            dropped: ex.dropped,
            retained: ex.retained.len(),
            modularity: ex.modularity,
        });
    }
    w.write_json("index.json", &index)?;
    w.write_json("census.json", &census)
}

/// Reads the communities persisted by the communities stage.
pub fn load_communities(dir: &Path) -> Result<Vec<Community>> {
    let index: Vec<CommunityEntry> = read_json(&dir.join("index.json"))?;
    index
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let mut rdr = csv::Reader::from_path(&path).map_err(|err| Error::csv(&path, err))?;
            let mut edges = Vec::new();
            for rec in rdr.deserialize::<(String, String, u32)>() {
                edges.push(rec.map_err(|err| Error::csv(&path, err))?);
            }
            let graph = Digraph::from_weighted_edges(e.nodes.clone(), edges);
            if graph.node_count() != e.size || graph.ids() != e.nodes.as_slice() {
                return Err(Error::Data(format!("{}: node list disagrees with edges", e.id)));
            }
            Ok(Community { id: e.id, graph })
        })
        .collect()
}

/// Community manifest entry extended with its weak label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub id: CommunityId,
    pub snapshot: u64,
    pub size: usize,
    pub nodes: Vec<String>,
    pub label: PatternLabel,
}

fn run_label(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let comms = load_communities(&ctx.dir(Stage::Communities))?;
    let labels: Vec<PatternLabel> =
        ctx.pool.install(|| comms.par_iter().map(|c| label_community(&c.graph)).collect());
    let mut counts: BTreeMap<String, usize> = Pattern::ALL.iter().map(|p| (p.name().to_string(), 0)).collect();
    counts.insert("unlabeled".into(), 0);
    let entries: Vec<LabeledEntry> = comms
        .iter()
        .zip(labels)
        .map(|(c, label)| {
            let key = label.pattern.map_or("unlabeled", |p| p.name());
            *counts.get_mut(key).expect("known key") += 1;
            LabeledEntry {
                id: c.id,
                snapshot: c.id.snapshot,
                size: c.size(),
                nodes: c.nodes().to_vec(),
                label,
            }
        })
        .collect();
    w.write_json("labels.json", &entries)?;
    w.write_json("label_counts.json", &counts)
}

pub fn load_labels(dir: &Path) -> Result<Vec<LabeledEntry>> {
    read_json(&dir.join("labels.json"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FeatureIndex {
    version: u32,
    names: Vec<String>,
    communities: Vec<CommunityId>,
}

fn feature_csv(m: &NodeFeatureMatrix) -> String {
    let mut s = String::from("node");
    for n in FEATURE_NAMES {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (node, row) in m.order.iter().zip(&m.rows) {
        s.push_str(node);
        for v in row {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s
}

fn run_features(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let comms = load_communities(&ctx.dir(Stage::Communities))?;
    let labeled: BTreeSet<CommunityId> = load_labels(&ctx.dir(Stage::Label))?
        .into_iter()
        .filter(|e| e.label.pattern.is_some())
        .map(|e| e.id)
        .collect();
    let todo: Vec<&Community> = comms.iter().filter(|c| labeled.contains(&c.id)).collect();
    let matrices: Vec<NodeFeatureMatrix> = ctx.pool.install(|| {
        todo.par_iter()
            .map(|c| community_features(c.id, &c.graph))
            .collect::<Result<_>>()
    })?;
    for m in &matrices {
        w.write(&format!("matrices/{}.csv", m.community), feature_csv(m).as_bytes())?;
    }
    w.write_json(
        "index.json",
        &FeatureIndex {
            version: FEATURE_VERSION,
            names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            communities: matrices.iter().map(|m| m.community).collect(),
        },
    )
}

/// Reads the raw feature matrices persisted by the features stage.
pub fn load_features(dir: &Path) -> Result<BTreeMap<CommunityId, NodeFeatureMatrix>> {
    let index: FeatureIndex = read_json(&dir.join("index.json"))?;
    if index.version != FEATURE_VERSION {
        return Err(Error::Data(format!(
            "feature version {} found, {FEATURE_VERSION} expected",
            index.version
        )));
    }
    let mut out = BTreeMap::new();
    for id in index.communities {
        let path = dir.join(format!("matrices/{id}.csv"));
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let mut order = Vec::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(&path, e))?;
            if rec.len() != FEATURE_COUNT + 1 {
                return Err(Error::Data(format!("{}: row with {} fields", path.display(), rec.len())));
            }
            order.push(rec[0].to_string());
            let mut row = [0.0; FEATURE_COUNT];
            for (k, v) in row.iter_mut().enumerate() {
                *v = rec[k + 1]
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad number `{}`", path.display(), &rec[k + 1])))?;
            }
            rows.push(row);
        }
        out.insert(id, NodeFeatureMatrix { community: id, order, rows });
    }
    Ok(out)
}

/// Autoencoder inputs of every community that has features.
pub fn load_inputs(communities_dir: &Path, features_dir: &Path) -> Result<BTreeMap<CommunityId, GraphInput>> {
    let mut features = load_features(features_dir)?;
    let mut out = BTreeMap::new();
    for c in load_communities(communities_dir)? {
        let Some(f) = features.remove(&c.id) else {
            continue;
        };
        if f.order.as_slice() != c.graph.ids() {
            return Err(Error::Data(format!("{}: feature rows out of node order", c.id)));
        }
        let adj = (0..c.graph.node_count()).map(|i| c.graph.neighbors(i).to_vec()).collect();
        out.insert(c.id, GraphInput::from_parts(adj, f)?);
    }
    if let Some(id) = features.keys().next() {
        return Err(Error::Data(format!("features for unknown community {id}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub pattern: Pattern,
    pub communities: usize,
    pub train: usize,
    pub distinct_train: usize,
    pub val: usize,
    pub ros_applied: bool,
    /// Why no split was produced, if none was.
    pub skipped: Option<String>,
}

fn run_datasets(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let labels = load_labels(&ctx.dir(Stage::Label))?;
    let sets = build_pattern_sets(labels.iter().map(|e| (e.id, e.label.pattern)));
    let mut summary = Vec::new();
    for ps in &sets {
        let seed = labeled_seed(ctx.seed(), &format!("pattern/{}", ps.pattern));
        let row = match prepare_capped(ps, seed, ctx.cfg.datasets.train_target) {
            Ok(split) => {
                w.write_json(&format!("splits/{}.json", ps.pattern), &split)?;
                SplitSummary {
                    pattern: ps.pattern,
                    communities: ps.len(),
                    train: split.train.len(),
                    distinct_train: split.distinct_train().len(),
                    val: split.val.len(),
                    ros_applied: split.ros_applied,
                    skipped: None,
                }
            }
            Err(Error::Data(reason)) => SplitSummary {
                pattern: ps.pattern,
                communities: ps.len(),
                train: 0,
                distinct_train: 0,
                val: 0,
                ros_applied: false,
                skipped: Some(reason),
            },
            Err(e) => return Err(e),
        };
        summary.push(row);
    }
    w.write_json("summary.json", &summary)
}

/// Splits persisted by the datasets stage, indexed by pattern.
pub fn load_splits(dir: &Path) -> Result<[Option<TrainValSplit>; 6]> {
    let mut out: [Option<TrainValSplit>; 6] = Default::default();
    for p in Pattern::ALL {
        let path = dir.join(format!("splits/{p}.json"));
        if path.is_file() {
            let s: TrainValSplit = read_json(&path)?;
            if s.pattern != p {
                return Err(Error::Data(format!("{} holds a {} split", path.display(), s.pattern)));
            }
            out[p.index()] = Some(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub variant: Variant,
    pub pattern: Pattern,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_monitor_loss: Option<f64>,
    pub file: String,
}

pub fn model_file(variant: Variant, pattern: Pattern) -> String {
    format!("models/{variant}-{pattern}.gae")
}

/// Seed of one (variant, pattern) training job.
pub fn model_seed(train_seed: u64, variant: Variant, pattern: Pattern) -> u64 {
    labeled_seed(train_seed, &format!("model/{variant}/{pattern}"))
}

fn run_train(ctx: &Ctx, w: &mut StageWriter, dest: &Path) -> Result<()> {
    let splits = load_splits(&ctx.dir(Stage::Datasets))?;
    let jobs: Vec<(Variant, &TrainValSplit)> = ctx
        .cfg
        .train
        .variants
        .iter()
        .flat_map(|&v| {
            ctx.cfg
                .train
                .patterns
                .iter()
                .filter_map(|p| splits[p.index()].as_ref())
                .map(move |s| (v, s))
        })
        .collect();
    let fresh: BTreeSet<String> = jobs.iter().map(|(v, s)| model_file(*v, s.pattern)).collect();

    // Models from an earlier run under the same configuration are kept, so
    // training can proceed one (variant, pattern) at a time.
    let mut summary: Vec<ModelSummary> = Vec::new();
    if let Ok(old) = Manifest::read(dest) {
        if old.fingerprint == ctx.fingerprint && verify_outputs(dest, &old).is_ok() {
            let prior: Vec<ModelSummary> = read_json(&dest.join("summary.json"))?;
            for m in prior.into_iter().filter(|m| !fresh.contains(&m.file)) {
                let path = dest.join(&m.file);
                w.write(&m.file, &fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
                summary.push(m);
            }
        }
    }

    let inputs = load_inputs(&ctx.dir(Stage::Communities), &ctx.dir(Stage::Features))?;
    let train_seed = ctx.seed();
    let trained: Vec<(GaeModel, u64)> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|&(v, split)| {
                let seed = model_seed(train_seed, v, split.pattern);
                let hyper = TrainConfig {
                    seed,
                    ..ctx.cfg.train.hyper.clone()
                };
                gae::train(v, split, &inputs, &hyper).map(|m| (m, seed))
            })
            .collect::<Result<_>>()
    })?;
    for (m, seed) in &trained {
        let file = model_file(m.variant, m.pattern);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).map_err(|e| Error::io(&file, e))?;
        w.write(&file, &bytes)?;
        summary.push(ModelSummary {
            variant: m.variant,
            pattern: m.pattern,
            seed: *seed,
            epochs: m.curve.len(),
            best_epoch: m.best_epoch,
            best_monitor_loss: m
                .curve
                .get(m.best_epoch.wrapping_sub(1))
                .map(|r| r.monitor_loss),
            file,
        });
    }
    summary.sort_by_key(|m| (m.variant, m.pattern));
    w.write_json("summary.json", &summary)
}

/// Loads every `*.gae` under `dir` (recursively), one slot per
/// (variant, pattern); duplicates are an error.
pub fn load_models(dir: &Path) -> Result<BTreeMap<Variant, [Option<GaeModel>; 6]>> {
    let mut files = Vec::new();
    collect_models(dir, &mut files)?;
    files.sort();
    let mut out: BTreeMap<Variant, [Option<GaeModel>; 6]> = BTreeMap::new();
    for path in files {
        let m = GaeModel::load(&path)?;
        let slot = &mut out.entry(m.variant).or_default()[m.pattern.index()];
        if slot.is_some() {
            return Err(Error::Data(format!(
                "more than one {}/{} model under {}",
                m.variant,
                m.pattern,
                dir.display()
            )));
        }
        *slot = Some(m);
    }
    Ok(out)
}

fn collect_models(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_models(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "gae") {
            out.push(path);
        }
    }
    Ok(())
}

fn run_evaluate(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let models_dir = match &ctx.opts.models_dir {
        Some(d) => d.clone(),
        None => ctx.dir(Stage::Train).join("models"),
    };
    let models = load_models(&models_dir)?;
    if models.is_empty() {
        return Err(Error::Data(format!("no models found under {}", models_dir.display())));
    }
    if ctx.opts.models_dir.is_some() {
        for (v, slots) in &models {
            for m in slots.iter().flatten() {
                let path = models_dir.join(model_file(*v, m.pattern));
                if let Ok(h) = hash_file(&path) {
                    w.inputs.insert(format!("model:{v}-{}", m.pattern), h);
                }
            }
        }
    }
    let inputs = load_inputs(&ctx.dir(Stage::Communities), &ctx.dir(Stage::Features))?;
    let splits = load_splits(&ctx.dir(Stage::Datasets))?;
    let mut val_sets: [Vec<&GraphInput>; 6] = Default::default();
    for s in splits.iter().flatten() {
        val_sets[s.pattern.index()] = s
            .val
            .iter()
            .map(|id| {
                inputs
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no features for validation community {id}")))
            })
            .collect::<Result<_>>()?;
    }
    let reports = ctx.pool.install(|| {
        models
            .par_iter()
            .map(|(v, slots)| {
                let refs: [Option<&GaeModel>; 6] = std::array::from_fn(|i| slots[i].as_ref());
                cross_evaluate(*v, &refs, &val_sets)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for (name, body) in bundle_files(&reports) {
        w.write(&name, body.as_bytes())?;
    }
    Ok(())
}

fn run_report(ctx: &Ctx, w: &mut StageWriter) -> Result<()> {
    let reports = parse_bundle(&ctx.dir(Stage::Evaluate))?;
    for (name, body) in bundle_files(&reports) {
        w.write(&name, body.as_bytes())?;
    }
    let mut best = String::from("pattern,variant,margin\n");
    for (p, b) in Pattern::ALL.iter().zip(select_best(&reports)) {
        match b {
            Some((v, m)) => best.push_str(&format!("{p},{v},{m:?}\n")),
            None => best.push_str(&format!("{p},none,{}\n", crate::evalreport::ABSENT)),
        }
    }
    w.write("best.csv", best.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            output_dir: dir.to_path_buf(),
            ..Default::default()
        };
        cfg.synth.per_pattern = 6;
        cfg.synth.windows = 2;
        cfg.synth.noise_edges = 20;
        cfg.datasets.train_target = 12;
        cfg.train.variants = vec![Variant::Gcn];
        cfg.train.hyper.max_epochs = 2;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny(Path::new("out"));
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[train.hyper]\nseed = 4").is_err());
        assert!(PipelineConfig::from_toml("[communities]\nmin_size = 1").is_err());
    }

    #[test]
    fn stage_seeds_are_independent() {
        let mut s = SeedConfig::default();
        let before: Vec<_> = Stage::ALL.iter().map(|&st| s.stage_seed(st)).collect();
        s.train = Some(99);
        let after: Vec<_> = Stage::ALL.iter().map(|&st| s.stage_seed(st)).collect();
        for (st, (a, b)) in Stage::ALL.iter().zip(before.iter().zip(&after)) {
            if *st == Stage::Train {
                assert_eq!(*b, Some(99));
            } else {
                assert_eq!(a, b, "{st}");
            }
        }
        assert_eq!(s.stage_seed(Stage::Label), None);
        assert_ne!(labeled_seed(1, "synth"), labeled_seed(1, "train"));
        assert_ne!(labeled_seed(1, "synth"), labeled_seed(2, "synth"));
    }

    #[test]
    fn fingerprints_follow_config_sections() {
        let cfg = tiny(Path::new("out"));
        let a = fingerprints(&cfg, Stage::Report).unwrap();
        let mut other = cfg.clone();
        other.datasets.train_target = 13;
        let b = fingerprints(&other, Stage::Report).unwrap();
        for s in Stage::ALL {
            let changed = a[&s] != b[&s];
            let downstream = matches!(s, Stage::Datasets | Stage::Train | Stage::Evaluate | Stage::Report);
            assert_eq!(changed, downstream, "{s}");
        }
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere");
        moved.train.variants = vec![Variant::Gat];
        assert_eq!(fingerprints(&moved, Stage::Report).unwrap(), a);
    }

    #[test]
    fn plan_and_resume_points() {
        let cfg = tiny(Path::new("out"));
        assert_eq!(plan(&cfg, None).unwrap(), Stage::ALL.to_vec());
        assert_eq!(
            plan(&cfg, Some(Stage::Label)).unwrap()[..2],
            [Stage::Label, Stage::Features]
        );
        let mut ext = cfg.clone();
        ext.input.path = Some(PathBuf::from("tx.csv"));
        assert_eq!(plan(&ext, None).unwrap()[0], Stage::Ingest);
        assert!(plan(&ext, Some(Stage::Synth)).is_err());
        assert_eq!("features".parse::<Stage>().unwrap(), Stage::Features);
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn prerequisites_mismatch_and_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let opts = RunOptions::default();
        match run_stage(Stage::Dissect, &cfg, &opts) {
            Err(Error::MissingPrerequisite { stage, missing }) => {
                assert_eq!((stage.as_str(), missing.as_str()), ("dissect", "ingest"))
            }
            other => panic!("{other:?}"),
        }
        run_stage(Stage::Synth, &cfg, &opts).unwrap();
        run_stage(Stage::Ingest, &cfg, &opts).unwrap();
        let first = fs::read(cfg.stage_dir(Stage::Ingest).join(MANIFEST_FILE)).unwrap();
        run_stage(Stage::Ingest, &cfg, &opts).unwrap();
        let second = fs::read(cfg.stage_dir(Stage::Ingest).join(MANIFEST_FILE)).unwrap();
        assert_eq!(first, second);

        let mut changed = cfg.clone();
        changed.synth.noise_edges = 21;
        assert!(matches!(
            run_stage(Stage::Dissect, &changed, &opts),
            Err(Error::ConfigMismatch { .. })
        ));

        let tx = cfg.stage_dir(Stage::Ingest).join("transactions.csv");
        let mut bytes = fs::read(&tx).unwrap();
        bytes.extend_from_slice(b"2022-10-03 00:00:00,a,b\n");
        fs::write(&tx, bytes).unwrap();
        assert!(matches!(
            run_stage(Stage::Dissect, &cfg, &opts),
            Err(Error::Tampered { .. })
        ));
        let leftovers: Vec<_> = fs::read_dir(tmp.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with('.'))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }

    #[test]
    fn failure_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let err = run_all(&cfg, Some(Stage::Label), &RunOptions::default()).unwrap_err();
        match &err {
            Error::Stage { stage, source } => {
                assert_eq!(stage, "label");
                assert!(matches!(**source, Error::MissingPrerequisite { .. }));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
    }
}
