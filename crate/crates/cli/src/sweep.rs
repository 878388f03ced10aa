//! Ablation sweeps: generate, train and evaluate one run per (value, seed).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use simgap::adapt::{evaluate, Dataset, StrategyKind};
use simgap::bev::{jsd, MarginalMap};
use simgap::sampling::NpcCountSampler;
use simgap::seed::derive_seed;

use crate::config::{DatasetConfig, RunConfig, SamplerSpec};
use crate::dataset::{generate, in_pool, load_dataset, load_marginal, marginal_of};
use crate::train::train_run;
use crate::CliError;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.json";
/// Placeholder a sampler's `marginal` may use for the sweep's reference marginal.
pub const REFERENCE_MARGINAL: &str = "reference";

const TARGET_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const REFERENCE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sampler,
    AssetCount,
    Weather,
    Postprocess,
    Palette,
    NpcCount,
    Strategy,
    TargetLabelFraction,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Sampler => "sampler",
            SweepAxis::AssetCount => "asset_count",
            SweepAxis::Weather => "weather",
            SweepAxis::Postprocess => "postprocess",
            SweepAxis::Palette => "palette",
            SweepAxis::NpcCount => "npc_count",
            SweepAxis::Strategy => "strategy",
            SweepAxis::TargetLabelFraction => "target_label_fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Source dataset and training settings shared by every point.
    #[serde(default)]
    pub base: RunConfig,
    pub axis: SweepAxis,
    /// Axis values, typed by the axis (sampler specs, integers, booleans, ...).
    pub values: Vec<serde_json::Value>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Target process. Unlabeled training target, labeled test set and the
    /// reference marginal are independent draws from it.
    #[serde(default = "DatasetConfig::real_world")]
    pub target: DatasetConfig,
    #[serde(default = "default_test_scenes")]
    pub test_scenes: usize,
    #[serde(default = "default_reference_scenes")]
    pub reference_scenes: usize,
    /// Keep each point's source dataset on disk.
    #[serde(default)]
    pub keep_datasets: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_test_scenes() -> usize {
    200
}

fn default_reference_scenes() -> usize {
    5000
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read sweep spec {}: {e}", path.display())))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("sweep spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.base.validate()?;
        if self.values.is_empty() {
            return Err(CliError::Validation("values: at least one axis value is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("seeds: at least one seed is required".into()));
        }
        if self.test_scenes == 0 || self.reference_scenes == 0 {
            return Err(CliError::Validation("test_scenes and reference_scenes must be positive".into()));
        }
        let target = DatasetConfig { seed: 0, ..self.target.clone() };
        target.validate().map_err(|e| CliError::Validation(format!("target: {e}")))?;
        if target.grid != self.base.dataset.grid {
            return Err(CliError::Validation("target.grid: must match base.dataset.grid".into()));
        }
        for v in &self.values {
            self.point_config(v, 0, Path::new(REFERENCE_MARGINAL))?;
        }
        Ok(())
    }

    /// The run config of one point, with the reference placeholder resolved.
    pub fn point_config(&self, value: &serde_json::Value, seed: u64, reference: &Path) -> Result<RunConfig, CliError> {
        let mut cfg = self.base.clone().with_seed(seed);
        let bad = |e: serde_json::Error| CliError::Validation(format!("values: {value} is not a valid {}: {e}", self.axis.as_str()));
        match self.axis {
            SweepAxis::Sampler => {
                let mut s: SamplerSpec = serde_json::from_value(value.clone()).map_err(bad)?;
                if let Some(m) = s.marginal_mut() {
                    if m.as_os_str() == REFERENCE_MARGINAL {
                        *m = reference.to_path_buf();
                    }
                }
                cfg.dataset.sampler = s;
            }
            SweepAxis::AssetCount => cfg.dataset.asset_count = serde_json::from_value(value.clone()).map_err(bad)?,
            SweepAxis::Weather => cfg.dataset.render.weather = Some(serde_json::from_value(value.clone()).map_err(bad)?),
            SweepAxis::Postprocess => {
                cfg.dataset.render.postprocess_on = Some(serde_json::from_value(value.clone()).map_err(bad)?)
            }
            SweepAxis::Palette => cfg.dataset.render.palette_size = Some(serde_json::from_value(value.clone()).map_err(bad)?),
            SweepAxis::NpcCount => {
                cfg.dataset.npc_count = serde_json::from_value::<NpcCountSampler>(value.clone()).map_err(bad)?
            }
            SweepAxis::Strategy => {
                cfg.training.adapt.strategy = serde_json::from_value::<StrategyKind>(value.clone()).map_err(bad)?
            }
            SweepAxis::TargetLabelFraction => {
                cfg.training.adapt.target_label_fraction = serde_json::from_value(value.clone()).map_err(bad)?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-seed configurations of the target process draws.
    pub fn target_configs(&self, seed: u64) -> (DatasetConfig, DatasetConfig, DatasetConfig) {
        let mk = |stream: u64, scenes: usize| DatasetConfig {
            seed: derive_seed(seed, stream, 0),
            scenes,
            ..self.target.clone()
        };
        (
            mk(TARGET_STREAM, self.target.scenes),
            mk(TEST_STREAM, self.test_scenes),
            mk(REFERENCE_STREAM, self.reference_scenes),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub axis: String,
    /// Compact JSON of the axis value.
    pub value: String,
    pub seed: u64,
    /// Divergence between the source label marginal and the reference target marginal.
    pub jsd: f64,
    pub target_iou: f64,
    /// `ok`, or the error that stopped this point.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    /// Spearman rank correlation of `jsd` against `target_iou` over successful rows.
    pub spearman_jsd_iou: Option<f64>,
}

impl SweepSummary {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "axis,value,seed,jsd,target_iou,status")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6e},{:.6},{}",
            r.axis,
            csv_field(&r.value),
            r.seed,
            r.jsd,
            r.target_iou,
            csv_field(&r.status)
        )?;
    }
    w.flush()?;
    Ok(())
}

struct SeedData {
    target: Dataset,
    test: Dataset,
    reference: MarginalMap,
    reference_path: PathBuf,
}

fn prepare_seed(spec: &SweepSpec, seed: u64, dir: &Path, threads: Option<usize>) -> anyhow::Result<SeedData> {
    let (t, e, r) = spec.target_configs(seed);
    generate(&t, &dir.join("target"), threads)?;
    generate(&e, &dir.join("test"), threads)?;
    generate(&r, &dir.join("reference"), threads)?;
    let (_, reference) = marginal_of(&dir.join("reference"))?;
    let reference_path = dir.join("reference_marginal.f32");
    reference.save(&reference_path, &reference_path.with_extension("json"))?;
    Ok(SeedData {
        target: load_dataset(&dir.join("target"))?.1,
        test: load_dataset(&dir.join("test"))?.1,
        // the stored copy, so a point's jsd matches an analysis of the saved files
        reference: load_marginal(&reference_path)?,
        reference_path,
    })
}

/// One point: generate the source, train, score on the test set.
fn run_point(spec: &SweepSpec, value: &serde_json::Value, seed: u64, data: &SeedData, dir: &Path) -> anyhow::Result<(f64, f64)> {
    let cfg = spec.point_config(value, seed, &data.reference_path)?;
    let src_dir = dir.join("source");
    generate(&cfg.dataset, &src_dir, Some(1))?;
    let (_, source) = load_dataset(&src_dir)?;
    let (_, marginal) = marginal_of(&src_dir)?;
    let divergence = jsd(&marginal, &data.reference)?;
    let summary = train_run(&cfg.training, &source, &data.target, Some(&data.test), dir, None, None)?;
    let ck = simgap::nn::read_checkpoint(&summary.checkpoint)?;
    let iou = evaluate(&ck.model, &data.test, cfg.training.adapt.threshold)?.mean_iou;
    if !spec.keep_datasets {
        fs::remove_dir_all(&src_dir).ok();
    }
    Ok((divergence, iou))
}

/// Runs every (seed, value) point, recording failures and continuing.
/// Points of one seed run in parallel on `threads` workers.
pub fn sweep(spec: &SweepSpec, out: &Path, threads: Option<usize>) -> anyhow::Result<SweepSummary> {
    spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        let data = prepare_seed(spec, seed, &seed_dir, threads)?;
        let base = rows.len();
        let batch: Vec<SweepRow> = in_pool(threads, || {
            spec.values
                .par_iter()
                .enumerate()
                .map(|(i, value)| {
                    let dir = seed_dir.join(format!("point_{i}"));
                    let (jsd, target_iou, status) = match run_point(spec, value, seed, &data, &dir) {
                        Ok((d, iou)) => (d, iou, "ok".to_string()),
                        Err(e) => (f64::NAN, f64::NAN, format!("error: {e:#}")),
                    };
                    SweepRow {
                        index: base + i,
                        axis: spec.axis.as_str().into(),
                        value: value.to_string(),
                        seed,
                        jsd,
                        target_iou,
                        status,
                    }
                })
                .collect()
        });
        rows.extend(batch);
        write_sweep_csv(&out.join(SWEEP_CSV), &rows)?;
    }
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let summary = SweepSummary {
        axis: spec.axis.as_str().into(),
        spearman_jsd_iou: spearman(
            &ok.iter().map(|r| r.jsd).collect::<Vec<_>>(),
            &ok.iter().map(|r| r.target_iou).collect::<Vec<_>>(),
        ),
        rows,
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_fixtures() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // ranks x = 1, 2.5, 2.5, 4 and y = 1, 2, 3, 4
        let r = spearman(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"x\""), "\"say \"\"x\"\"\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn axis_values_are_typed() {
        let mut spec = SweepSpec {
            base: RunConfig::default(),
            axis: SweepAxis::AssetCount,
            values: vec![serde_json::json!(4)],
            seeds: vec![0],
            target: DatasetConfig::real_world(),
            test_scenes: 10,
            reference_scenes: 10,
            keep_datasets: false,
        };
        spec.validate().unwrap();
        spec.values = vec![serde_json::json!("four")];
        assert!(spec.validate().is_err());
        spec.axis = SweepAxis::Sampler;
        spec.values = vec![serde_json::json!({"kind": "blend", "alpha": 0.5, "marginal": "reference"})];
        let cfg = spec.point_config(&spec.values[0], 0, Path::new("/x/m.f32")).unwrap();
        assert_eq!(cfg.dataset.sampler, SamplerSpec::Blend { alpha: 0.5, marginal: PathBuf::from("/x/m.f32") });
        spec.axis = SweepAxis::Strategy;
        spec.values = vec![serde_json::json!("no_adapt")];
        let cfg = spec.point_config(&spec.values[0], 5, Path::new("r")).unwrap();
        assert_eq!(cfg.training.adapt.strategy, StrategyKind::NoAdapt);
        assert_eq!(cfg.training.adapt.seed, 5);
    }
}
