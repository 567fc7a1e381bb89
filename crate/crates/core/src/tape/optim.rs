use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Gradients, Mat, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adaptive-moment optimiser with decoupled weight decay.
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Mat<T>, Mat<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor that has a gradient. Frozen tensors are
    /// never touched, not even by weight decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.cfg.eps);
        let decay = T::of(1.0 - lr * self.cfg.weight_decay);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = tb1 * *m + ob1 * g;
                *v = tb2 * *v + ob2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *p = *p * decay - step_size * *m / denom;
            });
        }
    }
}
