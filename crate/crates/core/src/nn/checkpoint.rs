//! Checkpoint file: one line of JSON header, then a little-endian `f32` blob
//! holding every parameter (declaration order) followed by the optimizer
//! velocities in the same order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AdaptModel, ArchConfig};
use super::optim::{OptimizerConfig, OptimizerState};
use super::schedule::GrlSchedule;
use super::NnError;

pub const CHECKPOINT_FORMAT: &str = "simgap-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: ArchConfig,
    /// Number of completed optimizer steps.
    pub iteration: u64,
    pub schedule: GrlSchedule,
    pub optimizer: OptimizerConfig,
    pub total_epochs: usize,
    pub params: Vec<(String, Vec<usize>)>,
    pub has_velocities: bool,
    /// Caller-defined training context (e.g. the run config) needed to resume.
    #[serde(default)]
    pub context: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: AdaptModel,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model: &AdaptModel, optimizer: Option<&OptimizerState>, iteration: u64, schedule: GrlSchedule) -> Self {
        let (opt_cfg, total_epochs) = match optimizer {
            Some(o) => (o.config, o.total_epochs),
            None => (OptimizerConfig::default(), 0),
        };
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            arch: model.arch().clone(),
            iteration,
            schedule,
            optimizer: opt_cfg,
            total_epochs,
            params: model.names().iter().cloned().zip(model.params().iter().map(|p| p.shape().to_vec())).collect(),
            has_velocities: optimizer.is_some(),
            context: serde_json::Value::Null,
        };
        Self { header, model: model.clone(), optimizer: optimizer.cloned() }
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), NnError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_string(&ck.header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    out.write_all(header.as_bytes())?;
    out.write_all(b"\n")?;
    for p in ck.model.params() {
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(opt) = &ck.optimizer {
        for vel in &opt.velocities {
            for v in vel {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(NnError::Checkpoint(format!("unsupported format `{}`", header.format)));
    }
    let mut model = AdaptModel::new(header.arch.clone(), 0)?;
    let declared: Vec<(String, Vec<usize>)> =
        model.names().iter().cloned().zip(model.params().iter().map(|p| p.shape().to_vec())).collect();
    if declared != header.params {
        return Err(NnError::Checkpoint("architecture mismatch between header and parameter list".into()));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let n = model.num_scalars();
    let expected = if header.has_velocities { 2 * n } else { n };
    if bytes.len() != expected * 4 {
        return Err(NnError::Checkpoint(format!("blob holds {} bytes, expected {}", bytes.len(), expected * 4)));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    model.load_flat(&floats[..n])?;
    let optimizer = header.has_velocities.then(|| {
        let mut st = OptimizerState::new(header.optimizer, header.total_epochs, model.params());
        let mut off = n;
        for v in &mut st.velocities {
            let len = v.len();
            v.copy_from_slice(&floats[off..off + len]);
            off += len;
        }
        st
    });
    Ok(Checkpoint { header, model, optimizer })
}
