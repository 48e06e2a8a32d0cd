//! Adam with decoupled weight decay over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update. Entries with `frozen[i] == true` are left untouched
    /// (no decay, no moment update).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], frozen: Option<&[bool]>) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            params[i] -= c.learning_rate * c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}
