//! Training and evaluation runs backed by dataset directories.

use std::cell::RefCell;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use simgap::adapt::{evaluate, AdaptError, Dataset, EpochRow, EvalReport, MetricsRow, TrainState, Trainer};
use simgap::nn::{read_checkpoint, write_checkpoint, AdaptModel, Checkpoint};

use crate::config::TrainingConfig;
use crate::dataset::{load_dataset, DatasetManifest};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
/// Latest state, rewritten after every epoch and when a run stops early.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";
const EPOCHS_HEADER: &str = "epoch,iter,target_iou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub total_iterations: u64,
    pub completed: bool,
    pub last: Option<MetricsRow>,
    pub checkpoint: PathBuf,
}

/// Everything a checkpoint must agree on to be resumed.
fn context(training: &TrainingConfig) -> serde_json::Value {
    serde_json::json!({ "adapt": training.adapt, "arch": training.arch })
}

fn checkpoint_of(state: &TrainState, training: &TrainingConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(&state.model, Some(&state.optimizer), state.iteration, training.adapt.schedule);
    ck.header.context = context(training);
    ck
}

/// Keeps the header and the rows of a CSV whose iteration column `col`
/// satisfies `keep`.
fn truncate_csv(path: &Path, header: &str, col: usize, keep: impl Fn(u64) -> bool) -> anyhow::Result<Vec<String>> {
    let mut rows = vec![header.to_string()];
    if let Ok(f) = fs::File::open(path) {
        for line in BufReader::new(f).lines().skip(1) {
            let line = line?;
            let key: u64 = line.split(',').nth(col).unwrap_or("").parse().with_context(|| format!("bad row in {}", path.display()))?;
            if keep(key) {
                rows.push(line);
            }
        }
    }
    Ok(rows)
}

fn open_csv(path: &Path, rows: &[String]) -> anyhow::Result<BufWriter<fs::File>> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        writeln!(w, "{r}")?;
    }
    Ok(w)
}

/// Trains on in-memory datasets, writing metrics and checkpoints into `out`.
/// With `resume`, training continues from that checkpoint and the logs are
/// cut back to its iteration first. `stop_at` ends the run early after that
/// many total steps.
pub fn train_run(
    training: &TrainingConfig,
    source: &Dataset,
    target: &Dataset,
    eval: Option<&Dataset>,
    out: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> anyhow::Result<TrainSummary> {
    training.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trainer = Trainer::new(training.adapt.clone(), source, target, eval)?;
    let mut state = match resume {
        Some(path) => {
            let ck = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            if ck.header.context != context(training) {
                return Err(CliError::Validation(format!(
                    "checkpoint {} was written by a different training config",
                    path.display()
                ))
                .into());
            }
            let Some(optimizer) = ck.optimizer else { bail!("checkpoint {} has no optimizer state", path.display()) };
            TrainState { model: ck.model, optimizer, iteration: ck.header.iteration }
        }
        None => TrainState::fresh(AdaptModel::new(training.arch.clone(), training.adapt.seed)?, &training.adapt),
    };
    let start = state.iteration;
    let metrics_path = out.join(METRICS_FILE);
    let epochs_path = out.join(EPOCHS_FILE);
    let (m_rows, e_rows) = if resume.is_some() {
        (
            truncate_csv(&metrics_path, MetricsRow::CSV_HEADER, 0, |i| i < start)?,
            truncate_csv(&epochs_path, EPOCHS_HEADER, 1, |i| i <= start)?,
        )
    } else {
        (vec![MetricsRow::CSV_HEADER.to_string()], vec![EPOCHS_HEADER.to_string()])
    };
    let mut metrics = open_csv(&metrics_path, &m_rows)?;
    let mut epochs = open_csv(&epochs_path, &e_rows)?;
    let mut last = None;
    let io_err: RefCell<Option<anyhow::Error>> = RefCell::new(None);
    let ck_path = out.join(CHECKPOINT_FILE);
    let result = trainer.run(
        &mut state,
        stop_at,
        &mut |row| {
            last = Some(*row);
            if let Err(e) = writeln!(metrics, "{}", row.to_csv()) {
                io_err.borrow_mut().get_or_insert(e.into());
            }
        },
        &mut |row: &EpochRow, st| {
            let res = writeln!(epochs, "{},{},{:.6}", row.epoch, row.iter, row.target_iou)
                .map_err(anyhow::Error::from)
                .and_then(|_| Ok(write_checkpoint(&ck_path, &checkpoint_of(st, training))?));
            if let Err(e) = res {
                io_err.borrow_mut().get_or_insert(e);
            }
        },
    );
    metrics.flush()?;
    epochs.flush()?;
    if let Some(e) = io_err.into_inner() {
        return Err(e);
    }
    match result {
        Ok(()) => {}
        Err(AdaptError::Diverged { iteration, reason, last_finite }) => {
            write_checkpoint(&out.join(DIVERGED_FILE), &checkpoint_of(&last_finite, training))?;
            bail!("training diverged at iteration {iteration}: {reason}; last finite state saved to {DIVERGED_FILE}");
        }
        Err(e) => return Err(e.into()),
    }
    let total = trainer.total_iterations();
    let completed = state.iteration >= total;
    let checkpoint = if completed { out.join(FINAL_FILE) } else { ck_path };
    write_checkpoint(&checkpoint, &checkpoint_of(&state, training))?;
    Ok(TrainSummary { iterations: state.iteration, total_iterations: total, completed, last, checkpoint })
}

pub fn dataset_path(p: &Option<PathBuf>, field: &str) -> Result<PathBuf, CliError> {
    p.clone().ok_or_else(|| CliError::Validation(format!("training.{field}: dataset directory is required")))
}

/// Loads the datasets named by the config and trains.
pub fn train_from_config(
    training: &TrainingConfig,
    out: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> anyhow::Result<TrainSummary> {
    training.validate()?;
    let (_, source) = load_dataset(&dataset_path(&training.source, "source")?)?;
    let (_, target) = load_dataset(&dataset_path(&training.target, "target")?)?;
    let eval = match &training.eval {
        Some(p) => Some(load_dataset(p)?.1),
        None => None,
    };
    train_run(training, &source, &target, eval.as_ref(), out, resume, stop_at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub threshold: f32,
    pub scenes: usize,
    pub mean_iou: f64,
}

/// Scores a checkpoint on a labeled dataset; writes `scene_id,iou` rows to
/// `out_csv`.
pub fn eval_run(checkpoint: &Path, dataset: &Path, threshold: f32, out_csv: &Path) -> anyhow::Result<EvalSummary> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Validation(format!("threshold {threshold} outside (0, 1)")).into());
    }
    let ck = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let (manifest, data) = load_dataset(dataset)?;
    check_compatible(&ck.model, &manifest)?;
    let report = evaluate(&ck.model, &data, threshold)?;
    write_eval_csv(out_csv, &manifest, &report)?;
    Ok(EvalSummary {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        threshold,
        scenes: data.len(),
        mean_iou: report.mean_iou,
    })
}

fn check_compatible(model: &AdaptModel, manifest: &DatasetManifest) -> anyhow::Result<()> {
    let (n, g) = (manifest.grid.size(), model.arch().grid);
    if n != g {
        bail!("architecture mismatch: checkpoint expects a {g}-cell grid, dataset has {n}");
    }
    Ok(())
}

pub fn write_eval_csv(path: &Path, manifest: &DatasetManifest, report: &EvalReport) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "scene_id,iou")?;
    for (rec, iou) in manifest.records.iter().zip(&report.per_scene) {
        writeln!(w, "{},{:.6}", rec.id, iou)?;
    }
    w.flush()?;
    Ok(())
}
