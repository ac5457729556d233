//! Randomized finite-difference checks of every differentiable operation,
//! both branches, the fusion path and both losses.

use std::sync::Arc;

use apnet_autograd::{grad_check, GradCheckReport, Graph, MixEntry, ParamStore, Tensor, Value};
use apnet_core::{Point3, RasterGeometry};
use apnet_model::branch::FUSION_GROUP;
use apnet_model::{
    build_fusion_inputs, kpconv_fuse, lovasz_softmax, make_kernel_layout, wce_loss, ABranch, BranchConfig, ClassWeights,
    KpConv, PBranch, PointInput, SegHead,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{PipelineError, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckSummary {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    /// Largest relative error over all trials.
    pub worst: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Objective = Box<dyn Fn(&mut Graph, &[Value]) -> apnet_autograd::Result<Value>>;

/// One randomized instance: the inputs and the scalar objective over them.
/// Parameters of `store` are appended to the inputs and bound in order.
type ModelObjective = Box<dyn Fn(&mut Graph, &ParamStore, &[Value]) -> apnet_autograd::Result<Value>>;

struct Case {
    inputs: Vec<Tensor>,
    store: Option<ParamStore>,
    objective: ModelObjective,
}

impl Case {
    fn plain(inputs: Vec<Tensor>, f: Objective) -> Self {
        Self { inputs, store: None, objective: Box::new(move |g, _, v| f(g, v)) }
    }

    fn run(self) -> apnet_autograd::Result<GradCheckReport> {
        let store = self.store.unwrap_or_default();
        let ids: Vec<_> = store.ids().collect();
        let n = self.inputs.len();
        let mut inputs = self.inputs;
        inputs.extend(ids.iter().map(|&id| store.tensor(id).clone()));
        let objective = self.objective;
        grad_check(
            |g, vals| {
                for (i, &id) in ids.iter().enumerate() {
                    g.bind_param(id, vals[n + i])?;
                }
                objective(g, &store, &vals[..n])
            },
            &inputs,
            STEP,
            TOLERANCE,
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Values at least 0.05 away from zero, so `relu` kinks are not crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Weighted sum of all entries with fixed random weights.
fn project(g: &mut Graph, v: Value, seed: u64) -> apnet_autograd::Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51f1_5eed);
    let w = random(&mut rng, g.shape(v).to_vec());
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.tensor_mut(id).data_mut() {
            *x = rng.gen_range(-0.8..0.8);
        }
    }
}

fn model_error(e: apnet_model::ModelError) -> apnet_autograd::TensorError {
    match e {
        apnet_model::ModelError::Tensor(t) => t,
        other => apnet_autograd::TensorError::ShapeMismatch { op: "model", detail: other.to_string() },
    }
}

fn tiny_branch() -> BranchConfig {
    BranchConfig {
        channels: 3,
        a_widths: vec![2, 3],
        p_widths: vec![3],
        p_neighbors: 3,
        p_candidates: 5,
        p_index_cell: 0.5,
        twice_forward_sum: true,
        head_layers: 2,
    }
}

fn points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n).map(|_| [rng.gen_range(0.05..extent), rng.gen_range(0.05..extent), rng.gen_range(0.0..0.3)]).collect()
}

type Builder = fn(&mut ChaCha8Rng, u64) -> Case;

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add/sub/mul/scale", |rng, t| {
            let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..5));
            Case::plain(
                vec![random(rng, vec![n, m]), random(rng, vec![n, m])],
                Box::new(move |g, v| {
                    let a = g.add(v[0], v[1])?;
                    let b = g.sub(a, v[1])?;
                    let c = g.mul(b, v[1])?;
                    let d = g.scale(c, -1.7);
                    project(g, d, t)
                }),
            )
        }),
        ("relu", |rng, t| {
            let n = rng.gen_range(1..8);
            Case::plain(vec![off_zero(rng, vec![n])], Box::new(move |g, v| {
                let r = g.relu(v[0]);
                project(g, r, t)
            }))
        }),
        ("log/exp", |rng, t| {
            let n = rng.gen_range(1..8);
            let x = Tensor::vector((0..n).map(|_| rng.gen_range(0.2..2.0)).collect());
            Case::plain(vec![x], Box::new(move |g, v| {
                let l = g.log(v[0]);
                let e = g.exp(l);
                let s = g.add(l, e)?;
                project(g, s, t)
            }))
        }),
        ("matmul", |rng, t| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            Case::plain(vec![random(rng, vec![m, k]), random(rng, vec![k, n])], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, t)
            }))
        }),
        ("add_bias/reshape", |rng, t| {
            let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
            Case::plain(vec![random(rng, vec![m, n]), random(rng, vec![n])], Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                let r = g.reshape(y, vec![m * n])?;
                project(g, r, t)
            }))
        }),
        ("concat", |rng, t| {
            let axis = rng.gen_range(0..2);
            let (m, n, extra) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let (sa, sb) = if axis == 0 { (vec![m, n], vec![extra, n]) } else { (vec![m, n], vec![m, extra]) };
            Case::plain(vec![random(rng, sa), random(rng, sb)], Box::new(move |g, v| {
                let c = g.concat(&[v[0], v[1], v[0]], axis)?;
                project(g, c, t)
            }))
        }),
        ("softmax/log_softmax", |rng, t| {
            let shape = vec![rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
            let axis = rng.gen_range(0..3);
            Case::plain(vec![random(rng, shape)], Box::new(move |g, v| {
                let s = g.softmax(v[0], axis)?;
                let l = g.log_softmax(v[0], axis)?;
                let x = g.add(s, l)?;
                project(g, x, t)
            }))
        }),
        ("sum/mean", |rng, _| {
            let n = rng.gen_range(1..10);
            Case::plain(vec![random(rng, vec![n])], Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.sum(sq);
                let m = g.mean(v[0]);
                let mm = g.mul(m, m)?;
                g.add(s, mm)
            }))
        }),
        ("gather_rows/scatter_add_rows/take", |rng, t| {
            let (rows, w) = (rng.gen_range(1..6), rng.gen_range(1..4));
            let gidx: Arc<[usize]> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..rows)).collect();
            let out_rows = rng.gen_range(1..5);
            let sidx: Arc<[usize]> = (0..gidx.len()).map(|_| rng.gen_range(0..out_rows)).collect();
            let tidx: Arc<[usize]> = (0..5).map(|_| rng.gen_range(0..out_rows * w)).collect();
            Case::plain(vec![random(rng, vec![rows, w])], Box::new(move |g, v| {
                let ga = g.gather_rows(v[0], gidx.clone())?;
                let sc = g.scatter_add_rows(ga, sidx.clone(), out_rows)?;
                let sq = g.mul(sc, sc)?;
                let flat = g.reshape(sq, vec![out_rows * w])?;
                let tk = g.take(flat, tidx.clone())?;
                project(g, tk, t)
            }))
        }),
        ("sparse_mix", |rng, t| {
            let (rows, blocks, width, out_rows) =
                (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5));
            let entries: Arc<[MixEntry]> = (0..rng.gen_range(0..12))
                .map(|_| MixEntry {
                    out_row: rng.gen_range(0..out_rows),
                    src_row: rng.gen_range(0..rows),
                    block: rng.gen_range(0..blocks),
                    weight: rng.gen_range(-1.0..1.0),
                })
                .collect();
            Case::plain(vec![random(rng, vec![rows, blocks * width])], Box::new(move |g, v| {
                let y = g.sparse_mix(v[0], entries.clone(), out_rows, width)?;
                let sq = g.mul(y, y)?;
                project(g, sq, t)
            }))
        }),
        ("group_max", |rng, t| {
            let (n, k, d) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            Case::plain(vec![random(rng, vec![n * k, d])], Box::new(move |g, v| {
                let y = g.group_max(v[0], k)?;
                project(g, y, t)
            }))
        }),
        ("conv2d", |rng, t| {
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            let (h, w, cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..3), rng.gen_range(1..3));
            Case::plain(vec![random(rng, vec![h, w, cin]), random(rng, vec![k, k, cin, cout])], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1])?;
                project(g, y, t)
            }))
        }),
        ("max_pool2/upsample2", |rng, t| {
            let (h, w, c) = (2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3), rng.gen_range(1..3));
            Case::plain(vec![random(rng, vec![h, w, c])], Box::new(move |g, v| {
                let p = g.max_pool2(v[0])?;
                let u = g.upsample2(p)?;
                let s = g.add(u, v[0])?;
                project(g, s, t)
            }))
        }),
        ("bilinear_sample", |rng, t| {
            let (h, w, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..3));
            let coords: Vec<(f64, f64)> =
                (0..rng.gen_range(1..6)).map(|_| (rng.gen_range(-1.0..w as f64), rng.gen_range(-1.0..h as f64))).collect();
            Case::plain(vec![random(rng, vec![h, w, c])], Box::new(move |g, v| {
                let (s, _) = g.bilinear_sample(v[0], &coords)?;
                let sq = g.mul(s, s)?;
                project(g, sq, t)
            }))
        }),
        ("a-branch", |rng, t| {
            let mut store = ParamStore::new();
            let branch = ABranch::new(&mut store, &tiny_branch(), 3, rng);
            randomize(&mut store, rng);
            let image = random(rng, vec![4, 6, 3]);
            Case {
                inputs: vec![image],
                store: Some(store),
                objective: Box::new(move |g, store, v| {
                    let y = branch.forward(g, store, v[0]).map_err(model_error)?;
                    project(g, y, t)
                }),
            }
        }),
        ("p-branch+head", |rng, t| {
            let mut store = ParamStore::new();
            let branch = PBranch::new(&mut store, &tiny_branch(), 4, rng);
            let head = SegHead::new(&mut store, "head", FUSION_GROUP, 3, 4, 2, rng);
            randomize(&mut store, rng);
            let pos = points(rng, 9, 2.0);
            let feats = random(rng, vec![9, 4]);
            Case {
                inputs: vec![],
                store: Some(store),
                objective: Box::new(move |g, store, _| {
                    let input = PointInput { positions: &pos, features: &feats };
                    let y = branch.forward(g, store, input, [t, t + 1]).map_err(model_error)?;
                    let y = head.forward(g, store, y).map_err(model_error)?;
                    project(g, y, t)
                }),
            }
        }),
        ("gaf path", |rng, t| {
            let geo = RasterGeometry::new(0.5, [0.0, 0.0], 4, 4).expect("valid geometry");
            let supports = points(rng, 8, 1.95);
            let queries = points(rng, 10, 1.95);
            let layout = make_kernel_layout(5, 0.5, 0.24, t).expect("valid layout");
            let mut store = ParamStore::new();
            let conv = KpConv::new(&mut store, "kpconv", layout, 4, 3, rng);
            let fa = random(rng, vec![4, 4, 2]);
            let fp = random(rng, vec![8, 2]);
            Case {
                inputs: vec![fa, fp],
                store: Some(store),
                objective: Box::new(move |g, store, v| {
                    let inputs =
                        build_fusion_inputs(g, &queries, &supports, v[0], v[1], &geo, 0.5, 32).map_err(model_error)?;
                    let y = kpconv_fuse(g, store, &inputs, &conv).map_err(model_error)?;
                    project(g, y, t)
                }),
            }
        }),
        ("wce", |rng, _| {
            let (n, k) = (rng.gen_range(2..12), rng.gen_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let weights = ClassWeights { weights: (0..k).map(|_| rng.gen_range(0.2..2.0)).collect(), frequencies: vec![0.0; k] };
            let logits = random(rng, vec![n, k]).data().iter().map(|x| 2.0 * x).collect();
            Case::plain(vec![Tensor::new(vec![n, k], logits).expect("shape")], Box::new(move |g, v| {
                wce_loss(g, v[0], &labels, &weights).map_err(model_error)
            }))
        }),
        ("lovasz-softmax", |rng, _| {
            let (n, k) = (rng.gen_range(2..12), rng.gen_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            Case::plain(vec![random(rng, vec![n, k])], Box::new(move |g, v| {
                let p = g.softmax(v[0], 1)?;
                lovasz_softmax(g, p, &labels).map_err(model_error)
            }))
        }),
    ]
}

/// Runs `trials` randomized instances of every check.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::new();
    for (k, (name, build)) in cases().into_iter().enumerate() {
        let mut summary = CheckSummary { name, trials, failures: 0, worst: 0.0 };
        for t in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add((k as u64) << 32 | t));
            let report = build(&mut rng, t).run().map_err(|e| PipelineError::Config(format!("{name} trial {t}: {e}")))?;
            summary.worst = summary.worst.max(report.max_error);
            summary.failures += !report.passed() as usize;
        }
        out.push(summary);
    }
    Ok(out)
}
