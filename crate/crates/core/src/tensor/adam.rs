use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step, one per parameter of the store it is stepped with.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> Option<&[f64]> {
        self.first.get(param).map(Vec::as_slice)
    }

    pub fn second_moment(&self, param: usize) -> Option<&[f64]> {
        self.second.get(param).map(Vec::as_slice)
    }

    /// Applies one update to every parameter in `store`.
    ///
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.grad(id).is_none()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {:?} has no gradient",
                store.name(id)
            )));
        }
        if self.first.is_empty() {
            self.first = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moment buffers but store has {} parameters",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, value, grad)) in store.entries_mut().enumerate() {
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
