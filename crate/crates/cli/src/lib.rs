//! Command-line orchestration for the sim-to-real laboratory: dataset
//! generation, marginal analysis, training, evaluation and sweeps.

pub mod analyze;
pub mod config;
pub mod dataset;
pub mod sweep;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running: exit code 2.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Recovers validation errors raised deep inside a runtime error chain.
    fn classify(e: anyhow::Error) -> Self {
        match e.downcast::<CliError>() {
            Ok(inner) => inner,
            Err(e) => CliError::Runtime(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "simgap", version, about = "Sim-to-real BEV segmentation laboratory")]
pub struct Cli {
    /// Worker threads for generation and sweeps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default run config as JSON.
    PrintDefaults,
    /// Generate a dataset directory from the config's dataset section.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the dataset and training seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the label marginals of two datasets.
    Analyze {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the datasets named in the config's training section.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total optimizer steps.
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Per-scene CSV to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Run an ablation sweep described by a sweep spec.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Runs one parsed command, writing a short JSON summary to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == Some(0) {
        return Err(CliError::Validation("--threads must be positive".into()));
    }
    let threads = cli.threads;
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    match cli.command {
        Command::PrintDefaults => println!("{}", RunConfig::default().to_json()),
        Command::Generate { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or(cfg.output_dir.clone());
            let m = dataset::generate(&cfg.dataset, &out, threads).map_err(CliError::classify)?;
            print(serde_json::json!({ "out": out, "scenes": m.scene_count, "sampler": m.sampler }));
        }
        Command::Analyze { a, b, out } => {
            let r = analyze::analyze(&a, &b, &out).map_err(CliError::classify)?;
            print(serde_json::json!({ "jsd": r.jsd, "jsd_bernoulli": r.jsd_bernoulli, "report": out.join(analyze::REPORT_FILE) }));
        }
        Command::Train { config, out, seed, resume, stop_at, source, target, eval } => {
            let mut cfg = load_config(&config, seed)?;
            let t = &mut cfg.training;
            t.source = source.or(t.source.take());
            t.target = target.or(t.target.take());
            t.eval = eval.or(t.eval.take());
            let out = out.unwrap_or(cfg.output_dir.clone());
            let s = train::train_from_config(&cfg.training, &out, resume.as_deref(), stop_at)
                .map_err(CliError::classify)?;
            print(serde_json::to_value(&s).expect("json"));
        }
        Command::Eval { checkpoint, dataset, out, threshold } => {
            let s = train::eval_run(&checkpoint, &dataset, threshold, &out).map_err(CliError::classify)?;
            print(serde_json::to_value(&s).expect("json"));
        }
        Command::Sweep { config, out } => {
            let spec = sweep::SweepSpec::load(&config)?;
            let s = sweep::sweep(&spec, &out, threads).map_err(CliError::classify)?;
            let failed = s.rows.iter().filter(|r| r.status != "ok").count();
            print(serde_json::json!({ "rows": s.rows.len(), "failed": failed, "spearman_jsd_iou": s.spearman_jsd_iou }));
        }
    }
    Ok(())
}
