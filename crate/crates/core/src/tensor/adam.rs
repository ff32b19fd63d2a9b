use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    /// Framework-default moments: (0.9, 0.999, 1e-8).
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { config, second: first.clone(), first, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters, then zeroes their gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("state tracks {} parameters, store has {}", self.first.len(), params.len()),
            });
        }
        for (_, name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = t.grad().expect("checked above").to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}
