//! Geometry-aware fusion: pixel features sampled at downsampled points,
//! concatenated with point features and convolved onto the original points
//! with a rigid kernel-point convolution. Also the ablation baselines.

use std::fmt;
use std::str::FromStr;

use apnet_autograd::{Graph, MixEntry, ParamId, ParamStore, Value};
use apnet_core::{Point3, RasterGeometry, SpatialIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{Linear, FUSION_GROUP};
use crate::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    AOnly,
    POnly,
    Addition,
    Concatenation,
    NaiveGaf,
    Gaf,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::AOnly,
        FusionStrategy::POnly,
        FusionStrategy::Addition,
        FusionStrategy::Concatenation,
        FusionStrategy::NaiveGaf,
        FusionStrategy::Gaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::AOnly => "a-only",
            FusionStrategy::POnly => "p-only",
            FusionStrategy::Addition => "addition",
            FusionStrategy::Concatenation => "concatenation",
            FusionStrategy::NaiveGaf => "naive-gaf",
            FusionStrategy::Gaf => "gaf",
        }
    }

    pub fn uses_aerial(self) -> bool {
        self != FusionStrategy::POnly
    }

    pub fn uses_points(self) -> bool {
        self != FusionStrategy::AOnly
    }

    pub fn is_fused(self) -> bool {
        self.uses_aerial() && self.uses_points()
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown fusion strategy `{s}`")))
    }
}

/// Kernel point offsets (meters) and the linear correlation radius.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    pub offsets: Vec<Point3>,
    pub sigma: f64,
    pub radius: f64,
}

impl KernelLayout {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// `max(0, 1 - |d - offset_m| / sigma)` for relative position `d`.
    pub fn correlation(&self, m: usize, d: &Point3) -> f64 {
        let o = &self.offsets[m];
        let e = [d[0] - o[0], d[1] - o[1], d[2] - o[2]];
        (1.0 - (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt() / self.sigma).max(0.0)
    }

    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.offsets.len() {
            for j in i + 1..self.offsets.len() {
                best = best.min(dist(&self.offsets[i], &self.offsets[j]));
            }
        }
        best
    }

    /// Text form: a `kernel-layout` line with K, sigma and radius, then one
    /// offset per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("kernel-layout {} {} {}\n", self.offsets.len(), self.sigma, self.radius);
        for o in &self.offsets {
            s.push_str(&format!("{} {} {}\n", o[0], o[1], o[2]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| ModelError::Config(format!("kernel layout: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split_whitespace().collect();
        let [tag, k, sigma, radius] = head[..] else { return Err(bad("malformed header")) };
        if tag != "kernel-layout" {
            return Err(bad("malformed header"));
        }
        let k: usize = k.parse().map_err(|_| bad("bad count"))?;
        let sigma = sigma.parse().map_err(|_| bad("bad sigma"))?;
        let radius = radius.parse().map_err(|_| bad("bad radius"))?;
        let offsets = lines
            .map(|l| {
                let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad offset"))?;
                <[f64; 3]>::try_from(v).map_err(|_| bad("offset needs three values"))
            })
            .collect::<Result<Vec<_>>>()?;
        if offsets.len() != k {
            return Err(bad("offset count differs from header"));
        }
        Ok(Self { offsets, sigma, radius })
    }
}

fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

const REPULSION_STEPS: usize = 500;

/// One offset at the origin plus `k - 1` points spread by inverse-distance
/// repulsion from seeded random starts, projected into the ball of radius
/// `radius` after every step.
pub fn make_kernel_layout(k: usize, radius: f64, sigma: f64, seed: u64) -> Result<KernelLayout> {
    if k == 0 {
        return Err(ModelError::Config("kernel point count must be positive".into()));
    }
    if !(radius > 0.0 && sigma > 0.0) {
        return Err(ModelError::Config("kernel radius and sigma must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Work in the unit ball; index 0 is the fixed origin.
    let mut pts: Vec<Point3> = vec![[0.0; 3]];
    while pts.len() < k {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r2: f64 = p.iter().map(|x| x * x).sum();
        if r2 <= 1.0 && r2 > 1e-4 {
            pts.push(p);
        }
    }
    for step in 0..REPULSION_STEPS {
        let eta = 0.05 * (1.0 - step as f64 / REPULSION_STEPS as f64) + 1e-3;
        let forces: Vec<Point3> = (1..k)
            .map(|i| {
                let mut f = [0.0; 3];
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let d = dist(&pts[i], &pts[j]).max(1e-6);
                    for a in 0..3 {
                        f[a] += (pts[i][a] - pts[j][a]) / (d * d * d);
                    }
                }
                f
            })
            .collect();
        for (i, f) in (1..k).zip(forces) {
            let norm = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
            if norm == 0.0 {
                continue;
            }
            for a in 0..3 {
                pts[i][a] += eta * f[a] / norm;
            }
            let r = dist(&pts[i], &[0.0; 3]);
            if r > 1.0 {
                pts[i] = pts[i].map(|x| x / r);
            }
        }
    }
    let offsets = pts
        .into_iter()
        .map(|p| {
            let mut o = p.map(|x| x * radius);
            // Scaling can round a boundary point just outside the ball.
            while dist(&o, &[0.0; 3]) > radius {
                o = o.map(|x| x * (1.0 - f64::EPSILON));
            }
            o
        })
        .collect();
    Ok(KernelLayout { offsets, sigma, radius })
}

/// Bilinear samples of an `[H, W, C]` feature raster at world points, with
/// pixel centers as sample locations. Returns `[n, C]` features and the number
/// of points whose sample coordinate was clamped to the raster border.
pub fn extract_pixel_features(
    g: &mut Graph,
    raster: Value,
    geometry: &RasterGeometry,
    points: &[Point3],
) -> Result<(Value, usize)> {
    let coords: Vec<(f64, f64)> = points.iter().map(|p| geometry.sample_coord(p[0], p[1])).collect();
    Ok(g.bilinear_sample(raster, &coords)?)
}

/// Inputs of one fused convolution.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    pub queries: Vec<Point3>,
    pub supports: Vec<Point3>,
    /// `[supports, 2C]`: pixel features then point features.
    pub features: Value,
    /// Per query, support indices within the radius, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    /// Support points sampled outside the raster.
    pub clamped: usize,
}

pub fn neighbor_lists(queries: &[Point3], supports: &[Point3], radius: f64, cap: usize) -> Result<Vec<Vec<usize>>> {
    let index = SpatialIndex::build(supports, radius)?;
    Ok(queries.iter().map(|q| index.radius_neighbors(q, radius, cap)).collect())
}

fn concat_support_features(g: &mut Graph, pixel: Value, point: Value, supports: usize) -> Result<Value> {
    let (pr, pc) = g.value(point).dims2()?;
    let (ar, ac) = g.value(pixel).dims2()?;
    if pr != supports || ar != supports {
        return Err(ModelError::Config(format!("{supports} support points but feature rows {ar} / {pr}")));
    }
    if ac != pc {
        return Err(ModelError::Config(format!("branch channel mismatch: {ac} vs {pc}")));
    }
    Ok(g.concat(&[pixel, point], 1)?)
}

/// Samples `f_a` at the support points, concatenates `f_p`, and collects the
/// support neighbours of every query within `radius` (at most `cap`).
#[allow(clippy::too_many_arguments)]
pub fn build_fusion_inputs(
    g: &mut Graph,
    queries: &[Point3],
    supports: &[Point3],
    f_a: Value,
    f_p: Value,
    geometry: &RasterGeometry,
    radius: f64,
    cap: usize,
) -> Result<FusionInputs> {
    let (pixel, clamped) = extract_pixel_features(g, f_a, geometry, supports)?;
    let features = concat_support_features(g, pixel, f_p, supports.len())?;
    Ok(FusionInputs {
        queries: queries.to_vec(),
        supports: supports.to_vec(),
        features,
        neighbors: neighbor_lists(queries, supports, radius, cap)?,
        clamped,
    })
}

/// Rigid kernel-point convolution from support features to query points.
#[derive(Clone, Debug)]
pub struct KpConv {
    pub layout: KernelLayout,
    /// `[c_in, K * c_out]`: kernel point `m` owns columns `m*c_out .. (m+1)*c_out`.
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl KpConv {
    pub fn new(store: &mut ParamStore, name: &str, layout: KernelLayout, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let k = layout.len();
        let weight = store.add_fan_in_uniform(format!("{name}.weight"), FUSION_GROUP, vec![c_in, k * c_out], c_in * k, rng);
        Self { layout, weight, c_in, c_out }
    }
}

/// `out[q] = sum_l sum_m h(p_l - p_q, m) * (f_l W_m)`; queries without
/// neighbours produce zeros.
pub fn kpconv_fuse(g: &mut Graph, store: &ParamStore, inputs: &FusionInputs, conv: &KpConv) -> Result<Value> {
    let w = g.param(store, conv.weight);
    kpconv_apply(g, inputs, &conv.layout, w, conv.c_out)
}

/// [`kpconv_fuse`] with the weight supplied as a graph value.
pub fn kpconv_apply(g: &mut Graph, inputs: &FusionInputs, layout: &KernelLayout, weight: Value, c_out: usize) -> Result<Value> {
    let projected = g.matmul(inputs.features, weight)?;
    let mut entries = Vec::new();
    for (q, nbrs) in inputs.neighbors.iter().enumerate() {
        let pq = inputs.queries[q];
        for &l in nbrs {
            let pl = inputs.supports[l];
            let d = [pl[0] - pq[0], pl[1] - pq[1], pl[2] - pq[2]];
            for m in 0..layout.len() {
                let h = layout.correlation(m, &d);
                if h > 0.0 {
                    entries.push(MixEntry { out_row: q, src_row: l, block: m, weight: h });
                }
            }
        }
    }
    Ok(g.sparse_mix(projected, entries, inputs.queries.len(), c_out)?)
}

/// Fusion variants used in the ablation, all at the downsampled level.
pub enum Baseline {
    /// `f_a + f_p`.
    Addition,
    /// `relu([f_a, f_p] W + b)` back to `C` channels.
    Concatenation(Linear),
    /// Kernel-point convolution with the downsampled points as both query
    /// and support set.
    NaiveGaf(KpConv),
}

/// Fused `[supports, C]` features from pixel features `f_a` (already sampled
/// at the support points) and point features `f_p`.
pub fn fuse_baseline(
    g: &mut Graph,
    store: &ParamStore,
    baseline: &Baseline,
    f_a: Value,
    f_p: Value,
    supports: &[Point3],
    radius: f64,
    cap: usize,
) -> Result<Value> {
    match baseline {
        Baseline::Addition => {
            if g.shape(f_a) != g.shape(f_p) {
                return Err(ModelError::Config(format!(
                    "addition needs equal shapes, got {:?} and {:?}",
                    g.shape(f_a),
                    g.shape(f_p)
                )));
            }
            Ok(g.add(f_a, f_p)?)
        }
        Baseline::Concatenation(linear) => {
            let cat = concat_support_features(g, f_a, f_p, supports.len())?;
            let y = linear.forward(g, store, cat)?;
            Ok(g.relu(y))
        }
        Baseline::NaiveGaf(conv) => {
            let features = concat_support_features(g, f_a, f_p, supports.len())?;
            let inputs = FusionInputs {
                queries: supports.to_vec(),
                supports: supports.to_vec(),
                features,
                neighbors: neighbor_lists(supports, supports, radius, cap)?,
                clamped: 0,
            };
            kpconv_fuse(g, store, &inputs, conv)
        }
    }
}
