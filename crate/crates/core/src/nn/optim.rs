use std::collections::HashMap;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    /// Epoch indices at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v` for every parameter with a
    /// gradient. Parameters without one are left alone.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("gradient for unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}
