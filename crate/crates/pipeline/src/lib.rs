//! Synthetic scenes, sample preparation, training, evaluation and the
//! ablation harness for the dual-branch segmentation model.

pub mod augment;
pub mod config;
pub mod gradcheck;
pub mod scene;
pub mod sample;
pub mod train;


pub use augment::Augmentation;
pub use config::{ExperimentConfig, Profile};
pub use sample::{prepare_crop, prepare_sample, PreparedSample};
pub use scene::{generate_scene, SceneParams, CLASS_COUNT, CLASS_NAMES};

use apnet_autograd::TensorError;
use apnet_core::CloudError;
use apnet_model::{LossParts, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("empty sample: {0}")]
    EmptySample(String),
    #[error("non-finite loss at epoch {epoch}, scene seed {scene_seed}: {parts:?}")]
    NonFiniteLoss { epoch: usize, scene_seed: u64, parts: LossParts },
    #[error("checkpoint incompatible with config: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
