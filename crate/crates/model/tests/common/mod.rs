#![allow(dead_code)]

use apnet_autograd::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Gradient check over `extra` inputs plus every parameter in `store`.
pub fn check_model<F>(store: &ParamStore, extra: Vec<Tensor>, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore, &[Value]) -> Value,
{
    let n_extra = extra.len();
    let ids: Vec<_> = store.ids().collect();
    let mut inputs = extra;
    inputs.extend(ids.iter().map(|&id| store.tensor(id).clone()));
    grad_check(
        |g, vals| {
            for (i, &id) in ids.iter().enumerate() {
                g.bind_param(id, vals[n_extra + i])?;
            }
            Ok(f(g, store, &vals[..n_extra]))
        },
        &inputs,
        H,
        TOL,
    )
    .unwrap()
}

/// Scalar that mixes every output element with fixed random weights, so no
/// gradient is trivially symmetric.
pub fn project(g: &mut Graph, v: Value, seed: u64) -> Value {
    let n = g.value(v).numel();
    let mut r = rng(seed);
    let w = Tensor::new(g.shape(v).to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}
