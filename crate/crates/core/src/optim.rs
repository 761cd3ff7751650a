//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Clears moment estimates and the step count.
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let mut sq = 0.0;
        for (name, t) in store.iter() {
            let g = t.grad().unwrap_or(&[]);
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {bad} in parameter {name}"
                )));
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (slot, (_, t)) in store.iter_mut().enumerate() {
            let (data, grad) = t.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..data.len() {
                let g = grad[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                grad[i] = 0.0;
            }
        }
        Ok(norm)
    }
}
