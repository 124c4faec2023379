use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamStore, Real, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-group learning-rate multipliers; missing groups use 1.
    pub group_lr_multipliers: HashMap<ParamGroup, f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            group_lr_multipliers: HashMap::new(),
        }
    }
}

impl AdamConfig {
    pub fn multiplier(&self, group: ParamGroup) -> f64 {
        self.group_lr_multipliers.get(&group).copied().unwrap_or(1.0)
    }
}

/// One Adam update of every parameter in `store`, then clears the gradients.
///
/// The effective learning rate of a parameter is `base_lr * multiplier(group)`.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<(), TensorError> {
    if !(cfg.base_lr > 0.0) {
        return Err(TensorError::InvalidLearningRate(cfg.base_lr));
    }
    if let Some(&bad) = cfg.group_lr_multipliers.values().find(|&&m| !(m > 0.0)) {
        return Err(TensorError::InvalidLearningRate(bad));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(TensorError::MissingGrad(p.name().to_string()));
    }
    store.adam_steps += 1;
    let t = store.adam_steps as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let eps = T::of(cfg.eps);
    for i in 0..store.len() {
        let p = store.get_mut(super::ParamId(i));
        let lr = T::of(cfg.base_lr * cfg.multiplier(p.group()));
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m1, m2) = (&mut p.moment1, &mut p.moment2);
        let data = p.tensor.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m1[j] = b1 * m1[j] + (T::one() - b1) * g;
            m2[j] = b2 * m2[j] + (T::one() - b2) * g * g;
            let mhat = m1[j] / c1;
            let vhat = m2[j] / c2;
            data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.clear_grads();
    Ok(())
}
