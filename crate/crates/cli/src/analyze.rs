//! Label-marginal comparison of two datasets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use simgap::bev::{jsd, jsd_with, GridSpec, JsdMode, MarginalMap};

use crate::dataset::marginal_of;
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub scenes: usize,
    pub sampler: String,
    pub mean_npcs: f64,
    /// Entry `k` counts scenes with `k` NPCs.
    pub npc_histogram: Vec<usize>,
    pub marginal_pgm: String,
    pub marginal_blob: String,
    pub marginal_header: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeReport {
    pub grid: GridSpec,
    /// Jensen-Shannon divergence of the normalized marginals, in nats.
    pub jsd: f64,
    /// Mean per-cell Bernoulli divergence, in nats.
    pub jsd_bernoulli: f64,
    pub a: DatasetSummary,
    pub b: DatasetSummary,
}

impl AnalyzeReport {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_marginal(m: &MarginalMap, out: &Path, stem: &str) -> anyhow::Result<(String, String, String)> {
    let (pgm, blob, header) = (format!("{stem}_marginal.pgm"), format!("{stem}_marginal.f32"), format!("{stem}_marginal.json"));
    m.write_pgm(std::io::BufWriter::new(fs::File::create(out.join(&pgm))?))?;
    m.save(&out.join(&blob), &out.join(&header))?;
    Ok((pgm, blob, header))
}

/// Compares the label marginals of datasets `a` and `b` and writes both
/// marginals plus `report.json` into `out`.
pub fn analyze(a: &Path, b: &Path, out: &Path) -> anyhow::Result<AnalyzeReport> {
    let (ma, pa) = marginal_of(a)?;
    let (mb, pb) = marginal_of(b)?;
    if ma.grid != mb.grid {
        return Err(CliError::Validation(format!("grid mismatch: {:?} vs {:?}", ma.grid, mb.grid)).into());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let summary = |path: &Path, m: &crate::dataset::DatasetManifest, marg: &MarginalMap, stem: &str| {
        let (marginal_pgm, marginal_blob, marginal_header) = write_marginal(marg, out, stem)?;
        let hist = m.npc_histogram();
        let total: usize = hist.iter().enumerate().map(|(k, c)| k * c).sum();
        anyhow::Ok(DatasetSummary {
            path: path.to_path_buf(),
            scenes: m.scene_count,
            sampler: m.sampler.clone(),
            mean_npcs: total as f64 / m.scene_count.max(1) as f64,
            npc_histogram: hist,
            marginal_pgm,
            marginal_blob,
            marginal_header,
        })
    };
    let report = AnalyzeReport {
        grid: ma.grid,
        jsd: jsd(&pa, &pb)?,
        jsd_bernoulli: jsd_with(&pa, &pb, JsdMode::Bernoulli)?,
        a: summary(a, &ma, &pa, "a")?,
        b: summary(b, &mb, &pb, "b")?,
    };
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
