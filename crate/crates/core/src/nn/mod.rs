//! Minimal reverse-mode autodiff, the segmentation/critic architecture,
//! gradient reversal and the Nesterov SGD optimizer.

mod checkpoint;
mod graph;
mod model;
mod optim;
mod schedule;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use graph::{log_sigmoid, sigmoid, Graph, Var};
pub use model::{AdaptModel, ArchConfig, BoundParams, ParamGroup, Upsample};
pub use optim::{sgd_step, OptimizerConfig, OptimizerState};
pub use schedule::GrlSchedule;
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("diverged: non-finite gradient in parameter `{param}`")]
    Diverged { param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
