//! Adam optimizer with a stepped learning-rate decay schedule.
//!
//! The effective learning rate after k completed steps is
//! `lambda * gamma^floor(k / 50)`: the base rate decays by a factor of gamma
//! once every 50 steps. Training uses `gamma = 1` (no decay); reconstruction
//! runs rely on the decay to anneal the continuous search.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("gradient length {got} does not match state length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
}

/// Hyperparameters. `beta1/beta2/eps` use the conventional defaults and are
/// rarely touched; `lambda` (base rate) and `gamma` (decay factor) are the
/// knobs the rest of the crate sets.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lambda: f64, gamma: f64) -> Self {
        AdamConfig { lambda, gamma, decay_interval: 50, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment accumulators for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Completed update count.
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        AdamState { cfg, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate that the *next* update will use.
    pub fn effective_rate(&self) -> f64 {
        effective_rate(&self.cfg, self.step)
    }

    /// One in-place Adam update of `values` along `grad`.
    ///
    /// Rejects non-finite gradient entries up front so a poisoned loss
    /// cannot silently corrupt the iterate.
    pub fn step(&mut self, values: &mut [f64], grad: &[f64]) -> Result<(), AdamError> {
        if grad.len() != self.m.len() || values.len() != self.m.len() {
            return Err(AdamError::LengthMismatch { expected: self.m.len(), got: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(AdamError::NonFiniteGradient(i));
        }
        let rate = self.effective_rate();
        let t = (self.step + 1) as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            values[i] -= rate * mhat / (vhat.sqrt() + c.eps);
        }
        self.step += 1;
        Ok(())
    }
}

fn effective_rate(cfg: &AdamConfig, completed_steps: u64) -> f64 {
    cfg.lambda * cfg.gamma.powi((completed_steps / cfg.decay_interval) as i32)
}
