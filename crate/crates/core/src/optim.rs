//! Stochastic gradient descent with momentum and L2 weight decay:
//! `v = mu v + (g + wd p)`, `p -= lr v`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        let velocity = params.iter().map(|(_, t)| alloc::vec![T::zero(); t.len()]).collect();
        Self { config, velocity }
    }

    /// One update from per-parameter gradients in store order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        let lr = T::of(self.config.lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for ((id, v), g) in ids.into_iter().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in params.get_mut(id).data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + *g + wd * *p;
                *p -= lr * *v;
            }
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}
