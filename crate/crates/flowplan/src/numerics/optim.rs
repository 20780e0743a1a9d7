//! Adam optimizer with bias correction, one state per network.

use super::net::{DenseNet, GradientTape};
use crate::error::{FlowError, Result};

/// Adam moment estimates for one `DenseNet`.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        OptimState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; net.param_count()],
            v: vec![0.0; net.param_count()],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients so a bad
    /// batch aborts instead of poisoning the parameters.
    pub fn step(&mut self, net: &mut DenseNet, grads: &GradientTape) -> Result<()> {
        if !grads.is_finite() {
            return Err(FlowError::numeric("non-finite gradient in Adam step"));
        }
        let flat_g = grads.flatten();
        if flat_g.len() != self.m.len() {
            return Err(FlowError::shape("gradient/optimizer size mismatch"));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let mut params = net.flatten_params();
        for i in 0..params.len() {
            let g = flat_g[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        net.load_params(&params)
    }
}
