use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use txpattern::gae::Variant;
use txpattern::indicators::Pattern;
use txpattern::pipeline::{self, PipelineConfig, RunOptions, Stage, StageOutcome};
use txpattern::temporal::Resolution;
use txpattern::{Error, Result};

/// Weakly labeled topological pattern detection over transaction graphs.
#[derive(Debug, Parser)]
#[command(name = "txpattern", version)]
struct Cli {
    /// TOML configuration; built-in defaults (synthetic corpus) if omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Overrides the master seed.
    #[arg(long, global = true)]
    master_seed: Option<u64>,

    /// Worker threads for feature extraction, partitioning and training.
    #[arg(long, short, global = true, default_value_t = 1)]
    jobs: usize,

    /// Print what would run without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage in order.
    Run {
        /// Resume at this stage; earlier artifacts must already exist.
        #[arg(long)]
        from: Option<Stage>,
        /// Snapshot width such as `7d` or `24h`.
        #[arg(long)]
        rho: Option<Resolution>,
    },
    /// Generate the synthetic corpus and its oracle.
    Synth,
    /// Load and normalize transactions.
    Ingest {
        /// Transaction file; overrides `input.path`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Split transactions into fixed-width snapshots.
    Dissect {
        #[arg(long)]
        rho: Option<Resolution>,
    },
    /// Partition snapshots into communities.
    Communities,
    /// Weakly label communities.
    Label,
    /// Compute node feature matrices.
    Features,
    /// Build pattern-sets and train/validation splits.
    Datasets,
    /// Train autoencoders.
    Train {
        /// Restrict to these variants (repeatable).
        #[arg(long)]
        variant: Vec<Variant>,
        /// Restrict to these patterns (repeatable).
        #[arg(long)]
        pattern: Vec<Pattern>,
        /// Train stage seed; overrides `seeds.train`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-evaluate trained models on every validation set.
    Evaluate {
        /// Directory searched for `*.gae` models instead of the train stage.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Where to write the report bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect the report bundle and the per-pattern selection.
    Report,
    /// Print the resolved configuration.
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = cli.master_seed {
        cfg.seeds.master = seed;
    }
    let mut opts = RunOptions {
        jobs: cli.jobs,
        ..Default::default()
    };
    let stage = match cli.command {
        Command::Run { from, rho } => {
            if let Some(rho) = rho {
                cfg.dissect.rho = rho;
            }
            cfg.validate()?;
            if cli.dry_run {
                for s in pipeline::plan(&cfg, from)? {
                    println!("would run {s} -> {}", cfg.stage_dir(s).display());
                }
                return Ok(());
            }
            for outcome in pipeline::run_all(&cfg, from, &opts)? {
                print_outcome(&outcome);
            }
            return Ok(());
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
        Command::Synth => Stage::Synth,
        Command::Ingest { input } => {
            if input.is_some() {
                cfg.input.path = input;
            }
            Stage::Ingest
        }
        Command::Dissect { rho } => {
            if let Some(rho) = rho {
                cfg.dissect.rho = rho;
            }
            Stage::Dissect
        }
        Command::Communities => Stage::Communities,
        Command::Label => Stage::Label,
        Command::Features => Stage::Features,
        Command::Datasets => Stage::Datasets,
        Command::Train {
            variant,
            pattern,
            seed,
        } => {
            if !variant.is_empty() {
                cfg.train.variants = variant;
            }
            if !pattern.is_empty() {
                cfg.train.patterns = pattern;
            }
            if seed.is_some() {
                cfg.seeds.train = seed;
            }
            Stage::Train
        }
        Command::Evaluate { models, out } => {
            opts.models_dir = models;
            opts.out_dir = out;
            Stage::Evaluate
        }
        Command::Report => Stage::Report,
    };
    cfg.validate()?;
    if cli.dry_run {
        let deps: Vec<&str> = stage.dependencies(&cfg).iter().map(|s| s.name()).collect();
        println!(
            "would run {stage} -> {} (reads: {})",
            cfg.stage_dir(stage).display(),
            if deps.is_empty() { "-".to_string() } else { deps.join(", ") }
        );
        return Ok(());
    }
    let outcome = pipeline::run_stage(stage, &cfg, &opts).map_err(|e| Error::Stage {
        stage: stage.name().into(),
        source: Box::new(e),
    })?;
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(o: &StageOutcome) {
    println!(
        "{:<12} {:>6} files  {}  {}",
        o.stage.name(),
        o.files,
        &o.fingerprint[..12],
        o.dir.display()
    );
}
