//! Minimal dense tensors with tape-based reverse-mode differentiation, the
//! AdamW optimizer, gradient checking and checkpoint files.

mod checkpoint;
mod graph;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{bilinear_taps, CustomBackward, Graph, MixEntry, Value};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid axis {axis} for rank-{rank} input to {op}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
