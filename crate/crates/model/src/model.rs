//! The assembled dual-branch model for one fusion strategy.

use std::sync::Arc;

use apnet_autograd::{Graph, ParamStore, Tensor, Value};
use apnet_core::{Point3, RasterGeometry};
use rand::Rng;

use crate::branch::{ABranch, BranchConfig, Linear, PBranch, PointInput, SegHead, FUSION_GROUP};
use crate::fusion::{
    build_fusion_inputs, extract_pixel_features, fuse_baseline, kpconv_fuse, make_kernel_layout, Baseline, FusionStrategy,
    KernelLayout, KpConv,
};
use crate::loss::{lovasz_softmax, total_loss, wce_loss, ClassWeights, LossParts};
use crate::{ModelError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub image_channels: usize,
    pub point_features: usize,
    pub branch: BranchConfig,
    pub strategy: FusionStrategy,
    pub kernel_points: usize,
    pub kernel_seed: u64,
    /// Fusion neighbourhood radius and kernel extent (meters).
    pub conv_radius: f64,
    /// Kernel correlation radius (meters).
    pub sigma: f64,
    pub neighbor_cap: usize,
    /// WCE factors for the aerial, point and fused heads.
    pub alpha: [f64; 3],
    /// Lovasz-softmax factor, applied to the strategy's final head.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 13,
            image_channels: 3,
            point_features: 6,
            branch: BranchConfig::default(),
            strategy: FusionStrategy::Gaf,
            kernel_points: 15,
            kernel_seed: 0,
            conv_radius: 0.5,
            sigma: 0.24,
            neighbor_cap: 32,
            alpha: [1.0; 3],
            beta: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        if self.classes == 0 || self.image_channels == 0 || self.point_features == 0 {
            return Err(ModelError::Config("class, image channel and point feature counts must be positive".into()));
        }
        if !(self.conv_radius > 0.0 && self.sigma > 0.0) || self.kernel_points == 0 || self.neighbor_cap == 0 {
            return Err(ModelError::Config("fusion radius, sigma, kernel points and neighbour cap must be positive".into()));
        }
        if self.alpha.iter().chain([&self.beta]).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ModelError::Config("loss factors must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One preprocessed training or evaluation sample.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    /// `[H, W, image_channels]` completed aerial image.
    pub image: Tensor,
    pub geometry: RasterGeometry,
    /// Per pixel (row-major, `v * W + u`), `IGNORE` on null pixels.
    pub pixel_labels: Vec<usize>,
    pub down_positions: Vec<Point3>,
    /// `[N^d, point_features]`.
    pub point_features: Tensor,
    pub down_labels: Vec<usize>,
    pub original_positions: Vec<Point3>,
    pub original_labels: Vec<usize>,
    /// Nearest barycenter of every original point.
    pub nearest_down: Vec<usize>,
}

pub struct ModelOutputs {
    /// `[H * W, classes]`.
    pub aerial: Option<Value>,
    /// `[N^d, classes]`.
    pub point: Option<Value>,
    /// `[N, classes]` at the original points.
    pub fused: Option<Value>,
    /// Support points sampled outside the raster.
    pub clamped: usize,
}

enum Fusion {
    Gaf(KpConv),
    Baseline(Baseline),
}

pub struct ApNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Option<KernelLayout>,
    aerial: Option<(ABranch, SegHead)>,
    point: Option<(PBranch, SegHead)>,
    fusion: Option<(Fusion, SegHead)>,
}

impl ApNet {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.branch.channels;
        let k = config.classes;
        let m = config.branch.head_layers;
        let strategy = config.strategy;
        let aerial = strategy.uses_aerial().then(|| {
            let branch = ABranch::new(&mut store, &config.branch, config.image_channels, rng);
            (branch, SegHead::new(&mut store, "head.a", FUSION_GROUP, c, k, m, rng))
        });
        let point = strategy.uses_points().then(|| {
            let branch = PBranch::new(&mut store, &config.branch, config.point_features, rng);
            (branch, SegHead::new(&mut store, "head.p", FUSION_GROUP, c, k, m, rng))
        });
        let mut layout = None;
        let fusion = match strategy {
            FusionStrategy::AOnly | FusionStrategy::POnly => None,
            FusionStrategy::Addition => Some(Fusion::Baseline(Baseline::Addition)),
            FusionStrategy::Concatenation => {
                let lin = Linear::new(&mut store, "fuse.concat", FUSION_GROUP, 2 * c, c, rng);
                Some(Fusion::Baseline(Baseline::Concatenation(lin)))
            }
            FusionStrategy::Gaf | FusionStrategy::NaiveGaf => {
                let l = make_kernel_layout(config.kernel_points, config.conv_radius, config.sigma, config.kernel_seed)?;
                layout = Some(l.clone());
                let conv = KpConv::new(&mut store, "fuse.kpconv", l, 2 * c, c, rng);
                Some(if strategy == FusionStrategy::Gaf {
                    Fusion::Gaf(conv)
                } else {
                    Fusion::Baseline(Baseline::NaiveGaf(conv))
                })
            }
        };
        let fusion = fusion.map(|f| (f, SegHead::new(&mut store, "head.fused", FUSION_GROUP, c, k, m, rng)));
        Ok(Self { config, store, layout, aerial, point, fusion })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.config.strategy
    }

    /// `seeds` drive the P-branch neighbour sampling.
    pub fn forward(&self, g: &mut Graph, sample: &SampleInputs, seeds: [u64; 2]) -> Result<ModelOutputs> {
        let store = &self.store;
        let classes = self.config.classes;
        let mut out = ModelOutputs { aerial: None, point: None, fused: None, clamped: 0 };
        let mut f_a = None;
        if let Some((branch, head)) = &self.aerial {
            let image = g.constant(sample.image.clone());
            let fa = branch.forward(g, store, image)?;
            let logits = head.forward(g, store, fa)?;
            let (h, w) = (sample.geometry.height, sample.geometry.width);
            out.aerial = Some(g.reshape(logits, vec![h * w, classes])?);
            f_a = Some(fa);
        }
        let mut f_p = None;
        if let Some((branch, head)) = &self.point {
            let input = PointInput { positions: &sample.down_positions, features: &sample.point_features };
            let fp = branch.forward(g, store, input, seeds)?;
            out.point = Some(head.forward(g, store, fp)?);
            f_p = Some(fp);
        }
        if let Some((fusion, head)) = &self.fusion {
            let (fa, fp) = (f_a.expect("fused strategies use both branches"), f_p.expect("fused strategies use both branches"));
            let (r, cap) = (self.config.conv_radius, self.config.neighbor_cap);
            match fusion {
                Fusion::Gaf(conv) => {
                    let inputs = build_fusion_inputs(
                        g,
                        &sample.original_positions,
                        &sample.down_positions,
                        fa,
                        fp,
                        &sample.geometry,
                        r,
                        cap,
                    )?;
                    out.clamped = inputs.clamped;
                    let fused = kpconv_fuse(g, store, &inputs, conv)?;
                    out.fused = Some(head.forward(g, store, fused)?);
                }
                Fusion::Baseline(baseline) => {
                    let (pixel, clamped) = extract_pixel_features(g, fa, &sample.geometry, &sample.down_positions)?;
                    out.clamped = clamped;
                    let fused = fuse_baseline(g, store, baseline, pixel, fp, &sample.down_positions, r, cap)?;
                    let logits = head.forward(g, store, fused)?;
                    let lift: Arc<[usize]> = sample.nearest_down.clone().into();
                    out.fused = Some(g.gather_rows(logits, lift)?);
                }
            }
        }
        Ok(out)
    }

    /// `L_all` with the Lovasz term on the strategy's final head.
    pub fn loss(
        &self,
        g: &mut Graph,
        outputs: &ModelOutputs,
        sample: &SampleInputs,
        weights: &ClassWeights,
    ) -> Result<(Value, LossParts)> {
        let wce = |g: &mut Graph, v: Option<Value>, labels: &[usize]| v.map(|v| wce_loss(g, v, labels, weights)).transpose();
        let a = wce(g, outputs.aerial, &sample.pixel_labels)?;
        let p = wce(g, outputs.point, &sample.down_labels)?;
        let f = wce(g, outputs.fused, &sample.original_labels)?;
        let (final_logits, final_labels) = match self.strategy() {
            FusionStrategy::AOnly => (outputs.aerial, &sample.pixel_labels),
            FusionStrategy::POnly => (outputs.point, &sample.down_labels),
            _ => (outputs.fused, &sample.original_labels),
        };
        let lovasz = match final_logits {
            Some(v) if self.config.beta != 0.0 => {
                let probs = g.softmax(v, 1)?;
                Some(lovasz_softmax(g, probs, final_labels)?)
            }
            _ => None,
        };
        let mut alpha = self.config.alpha;
        for (i, present) in [a.is_some(), p.is_some(), f.is_some()].into_iter().enumerate() {
            if !present {
                alpha[i] = 0.0;
            }
        }
        total_loss(g, [a, p, f], lovasz, alpha, self.config.beta)
    }

    /// Per-original-point predictions of each available head: aerial logits
    /// interpolated bilinearly, point logits copied from the nearest
    /// barycenter, fused logits used directly.
    pub fn head_predictions(&self, g: &mut Graph, outputs: &ModelOutputs, sample: &SampleInputs) -> Result<HeadPredictions> {
        let classes = self.config.classes;
        let aerial = match outputs.aerial {
            Some(v) => {
                let (h, w) = (sample.geometry.height, sample.geometry.width);
                let raster = g.reshape(v, vec![h, w, classes])?;
                let (lifted, _) = extract_pixel_features(g, raster, &sample.geometry, &sample.original_positions)?;
                Some(g.value(lifted).argmax_rows())
            }
            None => None,
        };
        let point = outputs.point.map(|v| {
            let per_down = g.value(v).argmax_rows();
            sample.nearest_down.iter().map(|&j| per_down[j]).collect()
        });
        let fused = outputs.fused.map(|v| g.value(v).argmax_rows());
        Ok(HeadPredictions { aerial, point, fused })
    }

    /// Predictions of the strategy's final head.
    pub fn final_predictions(&self, heads: &HeadPredictions) -> Vec<usize> {
        let pick = match self.strategy() {
            FusionStrategy::AOnly => &heads.aerial,
            FusionStrategy::POnly => &heads.point,
            _ => &heads.fused,
        };
        pick.clone().expect("strategy head present")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadPredictions {
    pub aerial: Option<Vec<usize>>,
    pub point: Option<Vec<usize>>,
    pub fused: Option<Vec<usize>>,
}
