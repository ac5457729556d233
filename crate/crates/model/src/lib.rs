//! Branch networks, geometry-aware fusion, losses, metrics and the assembled
//! dual-branch segmentation model.

pub mod branch;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;

pub use branch::{ABranch, BranchConfig, Linear, PBranch, PointInput, SegHead};
pub use fusion::{
    build_fusion_inputs, extract_pixel_features, fuse_baseline, kpconv_fuse, make_kernel_layout, FusionInputs,
    Baseline, FusionStrategy, KernelLayout, KpConv,
};
pub use loss::{inverse_frequency_weights, lovasz_softmax, total_loss, wce_loss, ClassWeights, LossParts, IGNORE};
pub use metrics::{ConfusionMatrix, Metrics};
pub use model::{ApNet, HeadPredictions, ModelConfig, ModelOutputs, SampleInputs};

use apnet_autograd::TensorError;
use apnet_core::CloudError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("every position carries the ignore label")]
    AllIgnored,
    #[error("missing {0} prediction")]
    MissingRepresentation(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;
