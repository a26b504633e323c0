//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Result<Self> {
        if lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            velocity: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
            lr,
            momentum,
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v ← momentum·v − lr·g; p ← p + v` for every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, store has {}",
                self.velocity.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let g = grads.get(id);
            let v = &mut self.velocity[id.index()];
            v.expect_same_shape(g)?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi - self.lr * gi;
            }
            let p = store.get_mut(id);
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi += vi;
            }
        }
        Ok(())
    }
}
