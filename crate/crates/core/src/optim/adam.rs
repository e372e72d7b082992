//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update of `params` in place. A non-finite gradient or update
/// leaves both the state and the parameters untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    let n = state.m.len();
    for (what, got) in [("Adam parameters", params.len()), ("Adam gradient", grad.len())] {
        if got != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                got,
            });
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("Adam gradient"));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut next = Vec::with_capacity(3 * n);
    for i in 0..n {
        let g = grad[i];
        let m = beta1 * state.m[i] + (1.0 - beta1) * g;
        let v = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let p = params[i] - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        if !p.is_finite() {
            return Err(Error::NonFinite("Adam update"));
        }
        next.extend([m, v, p]);
    }
    state.step += 1;
    for (i, c) in next.chunks_exact(3).enumerate() {
        state.m[i] = c[0];
        state.v[i] = c[1];
        params[i] = c[2];
    }
    Ok(())
}
