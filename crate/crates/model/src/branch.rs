//! Reference branch encoders and the per-location segmentation head.

use apnet_autograd::{Graph, ParamId, ParamStore, Tensor, Value};
use apnet_core::{Point3, SpatialIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

pub const AERIAL_GROUP: &str = "aerial";
pub const POINT_GROUP: &str = "point";
pub const FUSION_GROUP: &str = "fusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Output channels of both branches.
    pub channels: usize,
    /// A-branch encoder widths; one pooling stage between consecutive entries.
    pub a_widths: Vec<usize>,
    /// P-branch stage widths.
    pub p_widths: Vec<usize>,
    /// Neighbours pooled per point in each P-branch stage.
    pub p_neighbors: usize,
    /// Nearest candidates from which the neighbours are drawn at random.
    pub p_candidates: usize,
    /// Hash-grid cell side for the P-branch neighbour search (meters).
    pub p_index_cell: f64,
    /// Run the P-branch encoder twice with independent neighbour draws and sum.
    pub twice_forward_sum: bool,
    /// Linear layers in each segmentation head.
    pub head_layers: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            a_widths: vec![16, 32, 64],
            p_widths: vec![32, 32],
            p_neighbors: 16,
            p_candidates: 32,
            p_index_cell: 0.4,
            twice_forward_sum: true,
            head_layers: 2,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.a_widths.is_empty() || self.a_widths.contains(&0) {
            return bad("a_widths must be a nonempty list of positive widths");
        }
        if self.p_widths.is_empty() || self.p_widths.contains(&0) {
            return bad("p_widths must be a nonempty list of positive widths");
        }
        if self.p_neighbors == 0 || self.p_candidates < self.p_neighbors {
            return bad("p_neighbors must be positive and not exceed p_candidates");
        }
        if !(self.p_index_cell > 0.0) {
            return bad("p_index_cell must be positive");
        }
        if self.head_layers == 0 {
            return bad("head_layers must be at least 1");
        }
        Ok(())
    }

    /// Number of 2x poolings in the A-branch; raster sides must divide `2^depth`.
    pub fn a_depth(&self) -> usize {
        self.a_widths.len() - 1
    }
}

/// Dense layer `x W + b` over the last axis of a `[n, in]` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_fan_in_uniform(format!("{name}.weight"), group, vec![inputs, outputs], inputs, rng);
        let bias = store.add_zeros(format!("{name}.bias"), group, vec![outputs]);
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_fan_in_uniform(format!("{name}.weight"), AERIAL_GROUP, vec![3, 3, cin, cout], 9 * cin, rng);
        let bias = store.add_zeros(format!("{name}.bias"), AERIAL_GROUP, vec![cout]);
        Self { weight, bias }
    }

    fn forward_relu(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w)?;
        let y = g.add_bias(y, b)?;
        Ok(g.relu(y))
    }
}

/// Small encoder-decoder over an `H x W x 3` image: 3x3 convolutions, 2x max
/// pooling per stage, nearest upsampling with skip concatenation, and a final
/// 3x3 convolution to `channels` outputs.
pub struct ABranch {
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    channels: usize,
}

impl ABranch {
    pub fn new(store: &mut ParamStore, config: &BranchConfig, in_channels: usize, rng: &mut impl Rng) -> Self {
        let w = &config.a_widths;
        let mut encoder = Vec::new();
        let mut cin = in_channels;
        for (i, &c) in w.iter().enumerate() {
            encoder.push(Conv::new(store, &format!("a.enc{i}"), cin, c, rng));
            cin = c;
        }
        // Decoder stage i merges the upsampled deeper map with encoder level i.
        let mut decoder = Vec::new();
        for i in (0..w.len() - 1).rev() {
            let cout = if i == 0 { config.channels } else { w[i] };
            decoder.push(Conv::new(store, &format!("a.dec{i}"), cin + w[i], cout, rng));
            cin = cout;
        }
        if decoder.is_empty() {
            decoder.push(Conv::new(store, "a.out", cin, config.channels, rng));
        }
        Self { encoder, decoder, channels: config.channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Value) -> Result<Value> {
        let depth = self.encoder.len() - 1;
        let (h, w) = match g.shape(image) {
            &[h, w, _] => (h, w),
            s => return Err(ModelError::Config(format!("A-branch expects [H, W, C] input, got {s:?}"))),
        };
        if h % (1 << depth) != 0 || w % (1 << depth) != 0 {
            return Err(ModelError::Config(format!("raster {h}x{w} is not divisible by 2^{depth}")));
        }
        let mut skips = Vec::with_capacity(depth);
        let mut x = image;
        for (i, conv) in self.encoder.iter().enumerate() {
            if i > 0 {
                skips.push(x);
                x = g.max_pool2(x)?;
            }
            x = conv.forward_relu(g, store, x)?;
        }
        if depth == 0 {
            return self.decoder[0].forward_relu(g, store, x);
        }
        for conv in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = g.upsample2(x)?;
            let merged = g.concat(&[up, skip], 2)?;
            x = conv.forward_relu(g, store, merged)?;
        }
        Ok(x)
    }
}

/// Point positions (for neighbour search) and per-point input features.
#[derive(Clone, Copy, Debug)]
pub struct PointInput<'a> {
    pub positions: &'a [Point3],
    /// `[n, f]` input features.
    pub features: &'a Tensor,
}

struct PStage {
    edge: Linear,
    merge: Linear,
}

/// Per-point encoder: each stage embeds every neighbour (feature plus relative
/// offset), max-pools over the neighbourhood and merges the result with the
/// point's own feature.
pub struct PBranch {
    stages: Vec<PStage>,
    out: Linear,
    neighbors: usize,
    candidates: usize,
    index_cell: f64,
    twice: bool,
}

impl PBranch {
    pub fn new(store: &mut ParamStore, config: &BranchConfig, in_features: usize, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = in_features;
        for (i, &c) in config.p_widths.iter().enumerate() {
            let edge = Linear::new(store, &format!("p.stage{i}.edge"), POINT_GROUP, cin + 3, c, rng);
            let merge = Linear::new(store, &format!("p.stage{i}.merge"), POINT_GROUP, cin + c, c, rng);
            stages.push(PStage { edge, merge });
            cin = c;
        }
        let out = Linear::new(store, "p.out", POINT_GROUP, cin, config.channels, rng);
        Self {
            stages,
            out,
            neighbors: config.p_neighbors,
            candidates: config.p_candidates,
            index_cell: config.p_index_cell,
            twice: config.twice_forward_sum,
        }
    }

    pub fn channels(&self) -> usize {
        self.out.outputs
    }

    /// Neighbour indices (`n * k`, row-major) for every point: `k` of the
    /// `candidates` nearest points drawn without replacement, or all of them
    /// when there are no more candidates than `k`. Short lists are cycled.
    pub fn sample_neighborhoods(&self, positions: &[Point3], rng: &mut impl Rng) -> Result<Vec<usize>> {
        let index = SpatialIndex::build(positions, self.index_cell)?;
        let k = self.neighbors;
        let mut out = Vec::with_capacity(positions.len() * k);
        for p in positions {
            let cand = index.k_nearest(p, self.candidates);
            let chosen: Vec<usize> = if cand.len() > k {
                let mut picks = sample(rng, cand.len(), k).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|j| cand[j]).collect()
            } else {
                cand
            };
            out.extend((0..k).map(|j| chosen[j % chosen.len()]));
        }
        Ok(out)
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, input: PointInput, seed: u64) -> Result<Value> {
        let n = input.positions.len();
        let k = self.neighbors;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nbr = self.sample_neighborhoods(input.positions, &mut rng)?;
        let mut rel = Vec::with_capacity(n * k * 3);
        for (slot, &j) in nbr.iter().enumerate() {
            let (p, q) = (input.positions[slot / k], input.positions[j]);
            rel.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
        }
        let rel = g.constant(Tensor::new(vec![n * k, 3], rel)?);
        let nbr: std::sync::Arc<[usize]> = nbr.into();
        let mut h = g.constant(input.features.clone());
        for stage in &self.stages {
            // edge([h_j, rel]) = (h W_h)_j + rel W_r + b: project per point,
            // then gather, instead of multiplying every neighbour row.
            let cin = stage.edge.inputs - 3;
            let w = g.param(store, stage.edge.weight);
            let b = g.param(store, stage.edge.bias);
            let w_h = g.gather_rows(w, (0..cin).collect::<Vec<_>>())?;
            let w_r = g.gather_rows(w, (cin..cin + 3).collect::<Vec<_>>())?;
            let projected = g.matmul(h, w_h)?;
            let gathered = g.gather_rows(projected, nbr.clone())?;
            let offsets = g.matmul(rel, w_r)?;
            let e = g.add(gathered, offsets)?;
            let e = g.add_bias(e, b)?;
            let e = g.relu(e);
            let pooled = g.group_max(e, k)?;
            let merged = g.concat(&[h, pooled], 1)?;
            let m = stage.merge.forward(g, store, merged)?;
            h = g.relu(m);
        }
        let y = self.out.forward(g, store, h)?;
        Ok(g.relu(y))
    }

    /// `[n, channels]` features. `seeds` drive the neighbour draws of the two
    /// passes; only the first is used without twice-forward summation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: PointInput, seeds: [u64; 2]) -> Result<Value> {
        if input.positions.is_empty() {
            return Err(ModelError::Empty("P-branch input has no points"));
        }
        let (rows, _) = input.features.dims2()?;
        if rows != input.positions.len() {
            return Err(ModelError::Config(format!(
                "{} positions but {rows} feature rows",
                input.positions.len()
            )));
        }
        let first = self.encode(g, store, input, seeds[0])?;
        if !self.twice {
            return Ok(first);
        }
        let second = self.encode(g, store, input, seeds[1])?;
        Ok(g.add(first, second)?)
    }
}

/// `m` per-location linear layers with relu between them; the last maps to
/// the class count. Accepts `[n, c]` or `[h, w, c]` features and keeps the
/// leading dimensions.
pub struct SegHead {
    layers: Vec<Linear>,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, channels: usize, classes: usize, m: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..m)
            .map(|i| {
                let out = if i + 1 == m { classes } else { channels };
                Linear::new(store, &format!("{name}.{i}"), group, channels, out, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Value) -> Result<Value> {
        let shape = g.shape(features).to_vec();
        let c = *shape.last().ok_or_else(|| ModelError::Config("head input is a scalar".into()))?;
        if c != self.layers[0].inputs {
            return Err(ModelError::Config(format!("head expects width {}, got {c}", self.layers[0].inputs)));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let mut x = g.reshape(features, vec![rows, c])?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = layer.forward(g, store, x)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.layers.last().unwrap().outputs;
        Ok(g.reshape(x, out_shape)?)
    }
}
