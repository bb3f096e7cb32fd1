//! Reverse-mode differentiation, parameters, Adam and gradient checking.

mod adam;
mod check;
mod checkpoint;
mod graph;
mod linalg;
mod params;
mod suite;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use graph::{Conv1dSpec, Gradients, Graph, Var};
pub use params::{Bound, ParamGrads, ParamSet};
pub(crate) use params::{accumulate_grads, grad_norm, scale_grads};
pub use suite::primitive_suite;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    SpentTape,
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
