use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::store::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Gradients are rescaled when their global norm exceeds this value.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    step: u32,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, v)| Array2::zeros(v.raw_dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads, lr: f32) {
        let c = self.config;
        let norm = grads.global_norm() as f32;
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            grads.scale(c.clip_norm / norm);
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((w, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(w)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *w -= lr * (update + c.weight_decay * *w);
                });
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }
}
