//! Deterministic seeded parameter initialisation.
//!
//! Convolution and linear weights are drawn uniformly from
//! `[-sqrt(3/fan_in), sqrt(3/fan_in)]`, so each layer has unit weight variance
//! times `1/fan_in` and preserves activation scale when no normalisation
//! follows it; biases start at zero.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub struct Init<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = Float::sqrt(3.0 / fan_in.max(1) as f64);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.store.push(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.push(name, Tensor::full(shape, T::of(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}
