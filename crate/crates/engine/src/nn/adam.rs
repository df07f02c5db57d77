//! Adaptive-moment first-order optimizer with bias correction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates; serialized into checkpoints so training
/// can resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut state = AdamState::new(3);
        let cfg = AdamConfig::with_lr(0.0);
        let mut params = vec![0.5, -0.25, 1.0];
        let before = params.clone();
        state.update(&cfg, &mut params, &[1.0, -2.0, 3.0]);
        assert_eq!(params, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize f(x) = (x - 3)^2
        let mut state = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.1);
        let mut params = vec![0.0];
        for _ in 0..500 {
            let g = 2.0 * (params[0] - 3.0);
            state.update(&cfg, &mut params, &[g]);
        }
        assert!((params[0] - 3.0).abs() < 1e-2, "got {}", params[0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, the first update is roughly lr * sign(g).
        let mut state = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.01);
        let mut params = vec![0.0];
        state.update(&cfg, &mut params, &[123.0]);
        assert!((params[0] + 0.01).abs() < 1e-6, "got {}", params[0]);
    }
}
