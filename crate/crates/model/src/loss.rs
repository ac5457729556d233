//! Class-balanced cross-entropy, the Lovasz-softmax surrogate and their
//! weighted combination.

use apnet_autograd::{CustomBackward, Graph, Tensor, Value};

use crate::{ModelError, Result};

/// Label value excluded from every loss term.
pub const IGNORE: usize = usize::MAX;

const FREQUENCY_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub frequencies: Vec<f64>,
}

/// `w_c = 1 / (freq_c + 1e-3)` for present classes, the largest present weight
/// for absent ones, then scaled so the weights sum to the class count.
pub fn inverse_frequency_weights(histogram: &[usize]) -> Result<ClassWeights> {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return Err(ModelError::Empty("label histogram is all zeros"));
    }
    let frequencies: Vec<f64> = histogram.iter().map(|&h| h as f64 / total as f64).collect();
    let raw: Vec<Option<f64>> =
        histogram.iter().zip(&frequencies).map(|(&h, f)| (h > 0).then(|| 1.0 / (f + FREQUENCY_EPS))).collect();
    let max_present = raw.iter().flatten().fold(0.0f64, |m, &w| m.max(w));
    let filled: Vec<f64> = raw.iter().map(|w| w.unwrap_or(max_present)).collect();
    let scale = histogram.len() as f64 / filled.iter().sum::<f64>();
    Ok(ClassWeights { weights: filled.iter().map(|w| w * scale).collect(), frequencies })
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(ModelError::Config(format!("{n} predictions but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l >= k) {
        return Err(ModelError::Config(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean over non-ignored rows of `-w_y log softmax(logits)_y` for `[n, K]` logits.
pub fn wce_loss(g: &mut Graph, logits: Value, labels: &[usize], weights: &ClassWeights) -> Result<Value> {
    let (n, k) = g.value(logits).dims2()?;
    check_labels(labels, n, k)?;
    if weights.weights.len() != k {
        return Err(ModelError::Config(format!("{} class weights for {k} classes", weights.weights.len())));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    if kept.is_empty() {
        return Err(ModelError::AllIgnored);
    }
    let m = kept.len() as f64;
    let flat: Vec<usize> = kept.iter().map(|&i| i * k + labels[i]).collect();
    let coef: Vec<f64> = kept.iter().map(|&i| -weights.weights[labels[i]] / m).collect();
    let ls = g.log_softmax(logits, 1)?;
    let picked = g.take(ls, flat)?;
    let coef = g.constant(Tensor::vector(coef));
    let terms = g.mul(picked, coef)?;
    Ok(g.sum(terms))
}

/// Lovasz extension of the Jaccard loss for one class: `errors[i] = |fg_i - p_i|`.
/// Returns the value and d(value)/d(errors).
fn lovasz_class(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let gts = fg.iter().filter(|&&x| x).count() as f64;
    let mut grad = vec![0.0; errors.len()];
    let mut value = 0.0;
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    for &i in &order {
        if fg[i] {
            inter -= 1.0;
        } else {
            union += 1.0;
        }
        let jaccard = 1.0 - inter / union;
        grad[i] = jaccard - prev;
        value += errors[i] * grad[i];
        prev = jaccard;
    }
    (value, grad)
}

/// Loss and gradient w.r.t. the `[n, k]` probabilities, averaged over the
/// classes present among the non-ignored labels.
pub fn lovasz_softmax_parts(probs: &[f64], k: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    check_labels(labels, n, k)?;
    if probs.len() != n * k {
        return Err(ModelError::Config(format!("{} probabilities for {n} x {k}", probs.len())));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    if kept.is_empty() {
        return Err(ModelError::AllIgnored);
    }
    let mut present: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    let scale = 1.0 / present.len() as f64;
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for &c in &present {
        let fg: Vec<bool> = kept.iter().map(|&i| labels[i] == c).collect();
        let errors: Vec<f64> =
            kept.iter().zip(&fg).map(|(&i, &f)| (if f { 1.0 } else { 0.0 } - probs[i * k + c]).abs()).collect();
        let (value, g) = lovasz_class(&errors, &fg);
        total += value * scale;
        for ((&i, &f), gi) in kept.iter().zip(&fg).zip(g) {
            // d|fg - p| / dp is -1 on foreground, +1 elsewhere.
            grad[i * k + c] += scale * if f { -gi } else { gi };
        }
    }
    Ok((total, grad))
}

struct LovaszBackward {
    grad: Vec<f64>,
}

impl CustomBackward for LovaszBackward {
    fn backward(&self, grad_out: &[f64], _inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|g| g * grad_out[0]).collect())]
    }
}

/// Lovasz-softmax over `[n, K]` class probabilities (rows of a softmax).
pub fn lovasz_softmax(g: &mut Graph, probs: Value, labels: &[usize]) -> Result<Value> {
    let (_, k) = g.value(probs).dims2()?;
    let (value, grad) = lovasz_softmax_parts(g.value(probs).data(), k, labels)?;
    Ok(g.custom(&[probs], Tensor::scalar(value), Box::new(LovaszBackward { grad })))
}

/// Detached loss components for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub aerial: f64,
    pub point: f64,
    pub fused: f64,
    pub lovasz: f64,
    pub total: f64,
}

/// `sum_rep alpha_rep * WCE_rep + beta * Lovasz`. A term may be absent only
/// if its factor is zero.
pub fn total_loss(
    g: &mut Graph,
    wce: [Option<Value>; 3],
    lovasz: Option<Value>,
    alpha: [f64; 3],
    beta: f64,
) -> Result<(Value, LossParts)> {
    const NAMES: [&str; 3] = ["aerial", "point", "fused"];
    let mut parts = LossParts::default();
    let mut acc: Option<Value> = None;
    let mut push = |g: &mut Graph, v: Value, f: f64| {
        let term = g.scale(v, f);
        acc = Some(match acc {
            Some(a) => g.add(a, term).expect("scalar terms"),
            None => term,
        });
    };
    for (i, term) in wce.iter().enumerate() {
        match term {
            Some(v) => {
                let x = g.value(*v).item();
                match i {
                    0 => parts.aerial = x,
                    1 => parts.point = x,
                    _ => parts.fused = x,
                }
                if alpha[i] != 0.0 {
                    push(g, *v, alpha[i]);
                }
            }
            None if alpha[i] != 0.0 => return Err(ModelError::MissingRepresentation(NAMES[i])),
            None => {}
        }
    }
    match lovasz {
        Some(v) => {
            parts.lovasz = g.value(v).item();
            if beta != 0.0 {
                push(g, v, beta);
            }
        }
        None if beta != 0.0 => return Err(ModelError::MissingRepresentation("lovasz")),
        None => {}
    }
    let total = match acc {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    parts.total = g.value(total).item();
    Ok((total, parts))
}
