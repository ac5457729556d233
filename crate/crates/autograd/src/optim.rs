//! AdamW with per-group learning rates and a multiplicative per-epoch decay.

use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier per parameter group (absent groups use 1).
    pub group_multipliers: BTreeMap<String, f64>,
    /// Factor applied to every group learning rate by [`OptimizerState::epoch_end`].
    pub decay_per_epoch: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            group_multipliers: BTreeMap::new(),
            decay_per_epoch: 0.95,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamWConfig,
    step: u64,
    group_lr: BTreeMap<String, f64>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let mut group_lr = BTreeMap::new();
        for (_, p) in store.iter() {
            let mult = config.group_multipliers.get(&p.group).copied().unwrap_or(1.0);
            group_lr.entry(p.group.clone()).or_insert(config.lr * mult);
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self { config, step: 0, group_lr, first_moment: zeros.clone(), second_moment: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn learning_rate(&self, group: &str) -> Option<f64> {
        self.group_lr.get(group).copied()
    }

    /// One decoupled-weight-decay Adam update. Every parameter of `store`
    /// must have a gradient in `grads`.
    pub fn adamw_step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for (id, p) in store.iter() {
            match by_id[id.index()] {
                None => return Err(TensorError::MissingGrad(p.name.clone())),
                Some(g) if g.shape() != p.tensor.shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw_step",
                        detail: format!("grad {:?} for `{}` {:?}", g.shape(), p.name, p.tensor.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let lr = self.group_lr[&store.get(id).group];
            let g = by_id[id.index()].expect("checked").data();
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let p = store.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] *= 1.0 - lr * c.weight_decay;
                p[j] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn epoch_end(&mut self) {
        for lr in self.group_lr.values_mut() {
            *lr *= self.config.decay_per_epoch;
        }
    }
}
