use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction and global-norm clipping. Moment buffers are
/// keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param, grad)` entry and returns
    /// the gradient norm before clipping.
    pub fn step(&mut self, entries: &mut [(&str, &mut Tensor<F>, &Tensor<F>)]) -> f64 {
        let norm = entries
            .iter()
            .flat_map(|(_, _, g)| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let clip = F::of(clip);
        for (name, param, grad) in entries.iter_mut() {
            let len = param.len();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![F::zero(); len], vec![F::zero(); len]));
            let data = param.data_mut();
            for i in 0..len {
                let g = grad.data()[i] * clip;
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
