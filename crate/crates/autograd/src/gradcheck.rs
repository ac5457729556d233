//! Central finite-difference verification of reverse-mode gradients.

use crate::{Graph, Result, Tensor, TensorError, Value};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error per input tensor.
    pub input_errors: Vec<f64>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Relative error between an analytic and a numeric gradient of one input.
///
/// Each element is compared relative to `max(|a|, |n|)`, floored at `1e-3`
/// of the largest gradient magnitude of the same input so that entries that
/// are numerically zero do not divide by round-off.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vals)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarRoot(t.shape().to_vec()));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite(format!("grad_check objective evaluated to {y}")));
    }
    Ok(y)
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Value]) -> Result<Value>,
{
    let mut g = Graph::new();
    let vals: Vec<Value> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vals)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vals
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut input_errors = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let fp = evaluate(&f, &work)?;
            work[i].data_mut()[j] = x - h;
            let fm = evaluate(&f, &work)?;
            work[i].data_mut()[j] = x;
            *slot = (fp - fm) / (2.0 * h);
        }
        input_errors.push(relative_error(a, &numeric));
    }
    let max_error = input_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { input_errors, max_error, tolerance: tol })
}
