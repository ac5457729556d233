//! Experiment configuration: a TOML file with one table per concern,
//! layered over a named profile.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use apnet_autograd::AdamWConfig;
use apnet_model::branch::POINT_GROUP;
use apnet_model::{BranchConfig, FusionStrategy, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::scene::{SceneParams, CLASS_COUNT};
use crate::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 128 x 128 rasters over 20.48 m crops; sized for CPU training runs.
    Small,
    /// The published geometry: 0.04 m pixels, 512 x 512 rasters, 0.2 m grid.
    PaperRatio,
}

impl FromStr for Profile {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Profile::Small),
            "paper-ratio" => Ok(Profile::PaperRatio),
            other => Err(PipelineError::Config(format!("unknown profile `{other}` (expected small or paper-ratio)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Small => "small",
            Profile::PaperRatio => "paper-ratio",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    /// Pixel side `s` (meters).
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    pub completion_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Grid cell side `d` (meters).
    pub grid_size: f64,
    /// Height normalization of the point features (meters).
    pub height_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub conv_radius: f64,
    pub sigma: f64,
    pub kernel_points: usize,
    pub neighbor_cap: usize,
    pub kernel_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// WCE factors of the aerial, point and fused heads.
    pub alpha: [f64; 3],
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub point_lr_multiplier: f64,
    pub decay_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Side of the square training crops in pixels; 0 trains on full rasters.
    pub crop_pixels: usize,
    pub crops_per_scene: usize,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub strategy: FusionStrategy,
    pub out: PathBuf,
    pub scene: SceneParams,
    pub raster: RasterConfig,
    pub sampling: SamplingConfig,
    pub fusion: FusionConfig,
    pub branch: BranchConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let small = Self {
            seed: 0,
            strategy: FusionStrategy::Gaf,
            out: PathBuf::from("runs"),
            scene: SceneParams::default(),
            raster: RasterConfig { pixel_size: 0.16, width: 128, height: 128, completion_passes: 2 },
            sampling: SamplingConfig { grid_size: 0.5, height_scale: 5.0 },
            fusion: FusionConfig { conv_radius: 1.25, sigma: 0.6, kernel_points: 15, neighbor_cap: 32, kernel_seed: 0 },
            branch: BranchConfig { p_index_cell: 0.5, ..BranchConfig::default() },
            loss: LossConfig { alpha: [1.0; 3], beta: 1.0 },
            optim: OptimConfig { lr: 2e-3, weight_decay: 0.01, point_lr_multiplier: 5.0, decay_per_epoch: 0.95 },
            train: TrainConfig {
                epochs: 30,
                crop_pixels: 64,
                crops_per_scene: 4,
                batch_size: 4,
                train_scenes: 8,
                val_scenes: 2,
                augment: true,
            },
        };
        match profile {
            Profile::Small => small,
            Profile::PaperRatio => Self {
                raster: RasterConfig { pixel_size: 0.04, width: 512, height: 512, completion_passes: 2 },
                sampling: SamplingConfig { grid_size: 0.2, height_scale: 5.0 },
                fusion: FusionConfig { conv_radius: 0.5, sigma: 0.24, ..small.fusion.clone() },
                branch: BranchConfig { p_index_cell: 0.2, ..small.branch.clone() },
                optim: OptimConfig { lr: 1e-3, ..small.optim.clone() },
                scene: SceneParams { density: 100.0, ..small.scene.clone() },
                train: TrainConfig { crop_pixels: 256, ..small.train.clone() },
                ..small
            },
        }
    }

    /// Parses TOML text layered over `base`: keys absent from the text keep
    /// the base value.
    pub fn from_toml_str(text: &str, base: &ExperimentConfig) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(base).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge_tables(&mut merged, overrides);
        let config: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &Self::profile(profile))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Side of the square area covered by one raster (meters).
    pub fn coverage(&self) -> [f64; 2] {
        [self.raster.pixel_size * self.raster.width as f64, self.raster.pixel_size * self.raster.height as f64]
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: String| Err(PipelineError::Config(m));
        let r = &self.raster;
        if !(r.pixel_size > 0.0 && r.pixel_size.is_finite()) || r.width == 0 || r.height == 0 {
            return bad("raster pixel size and dimensions must be positive".into());
        }
        let step = 1usize << self.branch.a_widths.len().saturating_sub(1);
        if !r.width.is_multiple_of(step) || !r.height.is_multiple_of(step) {
            return bad(format!("raster {}x{} must be divisible by {step} for the A-branch pooling", r.width, r.height));
        }
        if !(self.sampling.grid_size > 0.0 && self.sampling.height_scale > 0.0) {
            return bad("grid size and height scale must be positive".into());
        }
        let [cw, ch] = self.coverage();
        if cw > self.scene.extent || ch > self.scene.extent {
            return bad(format!("raster coverage {cw} x {ch} m exceeds the scene extent {} m", self.scene.extent));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && o.point_lr_multiplier > 0.0 && o.decay_per_epoch > 0.0) {
            return bad("optimizer settings must be positive".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.train_scenes == 0 || t.val_scenes == 0 || t.crops_per_scene == 0 {
            return bad("epochs, batch size, crop and scene counts must be positive".into());
        }
        if t.epochs.max(t.train_scenes).max(t.val_scenes) >= 1 << 16 {
            return bad("epochs and scene counts must stay below 65536".into());
        }
        if !t.crop_pixels.is_multiple_of(step) || t.crop_pixels > r.width.min(r.height) {
            return bad(format!("training crop of {} pixels must fit the raster and be divisible by {step}", t.crop_pixels));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: CLASS_COUNT,
            image_channels: 3,
            point_features: 6,
            branch: self.branch.clone(),
            strategy: self.strategy,
            kernel_points: self.fusion.kernel_points,
            kernel_seed: self.fusion.kernel_seed,
            conv_radius: self.fusion.conv_radius,
            sigma: self.fusion.sigma,
            neighbor_cap: self.fusion.neighbor_cap,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.optim.lr,
            weight_decay: self.optim.weight_decay,
            decay_per_epoch: self.optim.decay_per_epoch,
            group_multipliers: [(POINT_GROUP.to_string(), self.optim.point_lr_multiplier)].into_iter().collect(),
            ..AdamWConfig::default()
        }
    }

    /// Scene seeds of the training split; disjoint from the validation split.
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train.train_scenes as u64).map(|i| split_seed(self.seed, 0, i)).collect()
    }

    pub fn val_seeds(&self) -> Vec<u64> {
        (0..self.train.val_scenes as u64).map(|i| split_seed(self.seed, 1, i)).collect()
    }
}

/// `master * 2^20 + split * 2^16 + index` for splits below 16; streams stay
/// disjoint while each holds fewer than 2^16 entries.
pub fn split_seed(master: u64, split: u64, index: u64) -> u64 {
    debug_assert!(split < 16 && index < 1 << 16, "split {split} index {index} out of range");
    master.wrapping_shl(20).wrapping_add(split << 16).wrapping_add(index & 0xffff)
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
