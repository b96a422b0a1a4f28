//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before each step; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to trainable parameters and zeroes every gradient.
    ///
    /// A non-finite gradient aborts the step before any value changes; the
    /// error names the offending parameter. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(AutodiffError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        let norm = match self.config.max_grad_norm {
            Some(max) => store.clip_grad_norm(max),
            None => store.grad_norm(),
        };

        if self.first.len() < store.len() {
            for (id, p) in store.iter().skip(self.first.len()) {
                debug_assert_eq!(id.index(), self.first.len());
                self.first.push(vec![0.0; p.value.len()]);
                self.second.push(vec![0.0; p.value.len()]);
            }
        }

        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let grads = p.grad.data().to_vec();
            for (k, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                *w -= c.lr * c.weight_decay * *w;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        store.zero_grads();
        Ok(norm)
    }
}
