//! Stochastic gradient descent with heavy-ball momentum.

use std::collections::BTreeMap;

use crate::networks::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Matrix>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate, momentum, velocity: BTreeMap::new() }
    }

    /// `v = momentum * v - lr * grad; w += v` for every given gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        for (id, grad) in grads {
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
            }
            for (wi, vi) in store.get_mut(*id).data_mut().iter_mut().zip(v.data()) {
                *wi += vi;
            }
        }
    }

    /// Forgets accumulated velocity, e.g. after parameters are re-initialised.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
