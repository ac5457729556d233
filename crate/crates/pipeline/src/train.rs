//! Training loop, per-head evaluation and the strategy ablation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use apnet_autograd::{Checkpoint, Graph, OptimizerState, Tensor};
use apnet_core::{write_cloud, CloudFormat, LabeledPointCloud};
use apnet_model::{inverse_frequency_weights, ApNet, ClassWeights, ConfusionMatrix, FusionStrategy, LossParts, Metrics};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Augmentation;
use crate::config::{split_seed, ExperimentConfig};
use crate::sample::{prepare_crop, prepare_sample, PreparedSample};
use crate::scene::{generate_scene, CLASS_COUNT};
use crate::{PipelineError, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAYOUT_FILE: &str = "kernel-layout.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Head {
    Aerial,
    Point,
    Fused,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Aerial => "aerial",
            Head::Point => "point",
            Head::Fused => "fused",
        }
    }

    /// The head whose predictions a strategy reports.
    pub fn final_for(strategy: FusionStrategy) -> Head {
        match strategy {
            FusionStrategy::AOnly => Head::Aerial,
            FusionStrategy::POnly => Head::Point,
            _ => Head::Fused,
        }
    }
}

/// Metrics of every available head on the original points of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub heads: Vec<(Head, Metrics)>,
    pub final_head: Head,
}

impl Evaluation {
    pub fn head(&self, head: Head) -> Option<&Metrics> {
        self.heads.iter().find(|(h, _)| *h == head).map(|(_, m)| m)
    }

    pub fn final_metrics(&self) -> &Metrics {
        self.head(self.final_head).expect("final head evaluated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss components over the epoch's samples.
    pub loss: LossParts,
    pub lr: f64,
    pub validation: Evaluation,
}

pub struct TrainOutcome {
    pub model: ApNet,
    pub history: Vec<EpochRecord>,
    /// Contents of the metrics CSV.
    pub metrics_csv: String,
}

impl TrainOutcome {
    pub fn last(&self) -> &EpochRecord {
        self.history.last().expect("at least one epoch")
    }
}

pub fn metrics_header() -> String {
    format!("epoch,head,lr,loss_total,loss_aerial,loss_point,loss_fused,loss_lovasz,{}", Metrics::csv_header(CLASS_COUNT))
}

fn metrics_rows(record: &EpochRecord) -> String {
    let l = &record.loss;
    let mut out = String::new();
    for (head, m) in &record.validation.heads {
        let _ = writeln!(
            out,
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            record.epoch,
            head.name(),
            record.lr,
            l.total,
            l.aerial,
            l.point,
            l.fused,
            l.lovasz,
            m.csv_fields()
        );
    }
    out
}

fn scene_center(config: &ExperimentConfig) -> [f64; 2] {
    [config.scene.extent / 2.0; 2]
}

/// Validation samples: the centred crop of each validation scene, unaugmented.
pub fn validation_samples(config: &ExperimentConfig) -> Result<Vec<PreparedSample>> {
    let center = scene_center(config);
    config
        .val_seeds()
        .into_iter()
        .map(|s| prepare_sample(&generate_scene(s, &config.scene)?, center, config))
        .collect()
}

/// Inverse-frequency class weights from the unaugmented training crops.
pub fn training_weights(config: &ExperimentConfig, clouds: &[LabeledPointCloud]) -> Result<ClassWeights> {
    let center = scene_center(config);
    let mut hist = vec![0usize; CLASS_COUNT];
    for cloud in clouds {
        let sample = prepare_sample(cloud, center, config)?;
        for &l in &sample.inputs.original_labels {
            hist[l] += 1;
        }
    }
    Ok(inverse_frequency_weights(&hist)?)
}

fn eval_seeds(index: usize) -> [u64; 2] {
    [2 * index as u64, 2 * index as u64 + 1]
}

/// Evaluates every head of `model` on `samples`, pooling counts over samples.
pub fn evaluate_model(model: &ApNet, samples: &[PreparedSample]) -> Result<Evaluation> {
    let strategy = model.strategy();
    let mut matrices: Vec<(Head, ConfusionMatrix)> = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let (heads, _) = predict(model, sample, eval_seeds(i))?;
        for (head, pred) in [(Head::Aerial, heads.aerial), (Head::Point, heads.point), (Head::Fused, heads.fused)] {
            let Some(pred) = pred else { continue };
            let idx = match matrices.iter().position(|(h, _)| *h == head) {
                Some(idx) => idx,
                None => {
                    matrices.push((head, ConfusionMatrix::new(CLASS_COUNT)));
                    matrices.len() - 1
                }
            };
            matrices[idx].1.add_all(&sample.inputs.original_labels, &pred)?;
        }
    }
    let heads = matrices.into_iter().map(|(h, m)| Ok((h, m.metrics()?))).collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { heads, final_head: Head::final_for(strategy) })
}

/// Per-original-point predictions of each head, plus the final head's.
pub fn predict(model: &ApNet, sample: &PreparedSample, seeds: [u64; 2]) -> Result<(apnet_model::HeadPredictions, Vec<usize>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.inputs, seeds)?;
    let heads = model.head_predictions(&mut g, &out, &sample.inputs)?;
    let fin = model.final_predictions(&heads);
    Ok((heads, fin))
}

fn init_model(config: &ExperimentConfig) -> Result<ApNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 3, 0));
    Ok(ApNet::new(config.model_config(), &mut rng)?)
}

/// Trains `config.strategy` and, when `out` is given, writes the metrics CSV,
/// the checkpoint, the config snapshot and the kernel layout there.
/// `progress` sees every epoch record as it completes.
pub fn train(config: &ExperimentConfig, out: Option<&Path>, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    }
    let center = scene_center(config);
    let train_seeds = config.train_seeds();
    let clouds = train_seeds.iter().map(|&s| generate_scene(s, &config.scene)).collect::<Result<Vec<_>>>()?;
    let weights = training_weights(config, &clouds)?;
    let val = validation_samples(config)?;

    let crop = if config.train.crop_pixels >= config.raster.width.min(config.raster.height) { 0 } else { config.train.crop_pixels };
    let half_diagonal = crop as f64 * config.raster.pixel_size / std::f64::consts::SQRT_2;
    let crop_radius = (0.45 * config.scene.extent - half_diagonal).max(0.0);

    let mut model = init_model(config)?;
    let mut opt = OptimizerState::new(config.optimizer_config(), &model.store);
    let ids: Vec<_> = model.store.ids().collect();
    let mut history = Vec::with_capacity(config.train.epochs);
    let mut csv = metrics_header();
    csv.push('\n');

    for epoch in 1..=config.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, 2, epoch as u64));
        let per_scene = if crop == 0 { 1 } else { config.train.crops_per_scene };
        let mut order: Vec<usize> = (0..clouds.len() * per_scene).map(|k| k % clouds.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let lr = opt.learning_rate(apnet_model::branch::FUSION_GROUP).unwrap_or(config.optim.lr);
        for batch in order.chunks(config.train.batch_size) {
            let mut grads: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.store.tensor(id).shape().to_vec())).collect();
            for &i in batch {
                let aug = if config.train.augment { Augmentation::draw(&mut rng) } else { Augmentation::IDENTITY };
                let cloud = aug.apply(&clouds[i], center)?;
                let sample = if crop == 0 {
                    prepare_sample(&cloud, center, config)?
                } else {
                    prepare_crop(&cloud, crop_center(&mut rng, center, crop_radius), config, crop, crop)?
                };
                let seeds = [rng.gen(), rng.gen()];
                let mut g = Graph::new();
                let outputs = model.forward(&mut g, &sample.inputs, seeds)?;
                let (loss, parts) = model.loss(&mut g, &outputs, &sample.inputs, &weights)?;
                if !parts.total.is_finite() {
                    return Err(PipelineError::NonFiniteLoss { epoch, scene_seed: train_seeds[i], parts });
                }
                g.backward(loss)?;
                for (id, grad) in g.param_grads() {
                    let acc = grads[id.index()].data_mut();
                    for (a, b) in acc.iter_mut().zip(grad.data()) {
                        *a += b / batch.len() as f64;
                    }
                }
                sum.aerial += parts.aerial;
                sum.point += parts.point;
                sum.fused += parts.fused;
                sum.lovasz += parts.lovasz;
                sum.total += parts.total;
            }
            let pairs: Vec<_> = ids.iter().copied().zip(grads).collect();
            opt.adamw_step(&mut model.store, &pairs)?;
        }
        opt.epoch_end();
        let n = order.len() as f64;
        let loss = LossParts {
            aerial: sum.aerial / n,
            point: sum.point / n,
            fused: sum.fused / n,
            lovasz: sum.lovasz / n,
            total: sum.total / n,
        };
        let record = EpochRecord { epoch, loss, lr, validation: evaluate_model(&model, &val)? };
        csv.push_str(&metrics_rows(&record));
        if let Some(dir) = out {
            fs::write(dir.join(METRICS_FILE), &csv)?;
        }
        progress(&record);
        history.push(record);
    }

    if let Some(dir) = out {
        save_model(&model, config, dir)?;
    }
    Ok(TrainOutcome { model, history, metrics_csv: csv })
}

/// Uniform point in the disk of `radius` around `center`.
fn crop_center(rng: &mut impl Rng, center: [f64; 2], radius: f64) -> [f64; 2] {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    [center[0] + r * t.cos(), center[1] + r * t.sin()]
}

fn save_model(model: &ApNet, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let meta = vec![
        ("strategy".to_string(), config.strategy.name().to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("epochs".to_string(), config.train.epochs.to_string()),
        ("classes".to_string(), CLASS_COUNT.to_string()),
    ];
    Checkpoint::from_store(&model.store, meta).save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(layout) = &model.layout {
        fs::write(dir.join(LAYOUT_FILE), layout.to_text())?;
    }
    Ok(())
}

/// Rebuilds the model described by `config` and loads `checkpoint` into it.
pub fn load_model(config: &ExperimentConfig, checkpoint: &Path) -> Result<ApNet> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(s) = ckpt.meta("strategy") {
        if s != config.strategy.name() {
            return Err(PipelineError::Checkpoint(format!("checkpoint holds strategy {s}, config asks for {}", config.strategy)));
        }
    }
    let mut model = init_model(config)?;
    ckpt.restore_into(&mut model.store).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
    Ok(model)
}

/// Evaluates a trained model on the scenes of `split_seed`'s evaluation split
/// (or the validation split when `None`), writing predicted clouds when `out`
/// is given.
pub fn evaluate(config: &ExperimentConfig, checkpoint: &Path, split: Option<u64>, out: Option<&Path>) -> Result<Evaluation> {
    let model = load_model(config, checkpoint)?;
    let samples = match split {
        None => validation_samples(config)?,
        Some(s) => {
            let center = scene_center(config);
            (0..config.train.val_scenes as u64)
                .map(|i| prepare_sample(&generate_scene(split_seed(s, 1, i), &config.scene)?, center, config))
                .collect::<Result<Vec<_>>>()?
        }
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        for (i, sample) in samples.iter().enumerate() {
            let (_, pred) = predict(&model, sample, eval_seeds(i))?;
            let cloud = LabeledPointCloud::new(
                sample.cloud.positions().to_vec(),
                sample.cloud.colors().to_vec(),
                Some(pred),
                CLASS_COUNT,
            )?;
            write_cloud(&cloud, &dir.join(format!("predictions-{i}.xyzrgbl")), CloudFormat::XyzrgblText)?;
        }
    }
    evaluate_model(&model, &samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    /// Final-head metrics per seed, in seed order.
    pub per_seed: Vec<Metrics>,
    /// Every head's metrics per seed.
    pub evaluations: Vec<Evaluation>,
}

impl AblationRow {
    pub fn mean_miou(&self) -> f64 {
        self.per_seed.iter().map(|m| m.miou).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn mean_oa(&self) -> f64 {
        self.per_seed.iter().map(|m| m.oa).sum::<f64>() / self.per_seed.len() as f64
    }
}

/// Trains and evaluates every strategy for every seed under otherwise
/// identical configs. Output goes to `<out>/<strategy>/seed-<n>` when given.
pub fn ablate(
    config: &ExperimentConfig,
    strategies: &[FusionStrategy],
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(FusionStrategy, u64, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(PipelineError::Config("ablation needs at least one strategy and one seed".into()));
    }
    if strategies.iter().collect::<BTreeSet<_>>().len() != strategies.len() {
        return Err(PipelineError::Config("ablation strategies contain duplicates".into()));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(PipelineError::Config("ablation seeds contain duplicates".into()));
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        let mut row = AblationRow { strategy, per_seed: Vec::new(), evaluations: Vec::new() };
        for &seed in seeds {
            let run = ExperimentConfig { seed, strategy, ..config.clone() };
            let dir = out.map(|o| o.join(strategy.name()).join(format!("seed-{seed}")));
            let outcome = train(&run, dir.as_deref(), |r| progress(strategy, seed, r))?;
            let eval = outcome.last().validation.clone();
            row.per_seed.push(eval.final_metrics().clone());
            row.evaluations.push(eval);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Plain-text table: strategy, OA and mIoU as mean [min, max] over seeds (%).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let span = |xs: Vec<f64>| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        format!("{:6.2} [{:6.2}, {:6.2}]", 100.0 * mean, 100.0 * lo, 100.0 * hi)
    };
    let mut s = format!("{:<14} {:<24} {:<24}\n", "strategy", "OA", "mIoU");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<24} {:<24}",
            r.strategy.name(),
            span(r.per_seed.iter().map(|m| m.oa).collect()),
            span(r.per_seed.iter().map(|m| m.miou).collect())
        );
    }
    s
}
