//! Parameter update rules: plain SGD for the Main Net, Adam for the RRN.

use crate::error::{contract, Error, Result};
use crate::scalar::{all_finite, Scalar};

/// `params -= lr * grad`.
pub fn sgd_step<S: Scalar>(params: &mut [S], grad: &[S], lr: S) -> Result<()> {
    if params.len() != grad.len() {
        return contract(format!("gradient length {} != parameter length {}", grad.len(), params.len()));
    }
    if !all_finite(grad) {
        return Err(Error::Numeric("non-finite gradient in SGD step".into()));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p = *p - lr * *g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers; zero until the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    params: &mut [S],
    grad: &[S],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return contract("Adam state, parameters and gradient must have equal length");
    }
    if !all_finite(grad) || !all_finite(params) {
        return Err(Error::Numeric("non-finite input to Adam step".into()));
    }
    state.t += 1;
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let one = S::one();
    let wd = S::lit(cfg.weight_decay);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i] + wd * params[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
