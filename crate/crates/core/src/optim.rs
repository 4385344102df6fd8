//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter in the store.
/// Gradients are left untouched; the caller zeroes them.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NumericError> {
    if cfg.lr <= 0.0 {
        return Err(NumericError::InvalidLearningRate(cfg.lr));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.iter_mut() {
        let m = state
            .first
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.rows(), p.value.cols()));
        let v = state
            .second
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.rows(), p.value.cols()));
        for i in 0..p.value.len() {
            let g = p.gradient.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) {
    let norm = store.global_grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.gradient.data_mut() {
                *g *= s;
            }
        }
    }
}
