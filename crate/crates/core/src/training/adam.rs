use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::{GradientRecord, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments per parameter, in parameter-set order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// updated value would be non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradientRecord,
    state: &mut OptimizerState,
) -> Result<(), TrainError> {
    let c = state.config;
    if state.m.len() != params.len() {
        return Err(TrainError::InvalidConfig("optimizer state does not match parameters".into()));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let mut staged = Vec::with_capacity(params.len());
    for (i, (name, p)) in params.iter().enumerate() {
        let g = grads.get(name);
        if g.is_some_and(|g| g.shape() != p.shape()) || state.m[i].shape() != p.shape() {
            return Err(TrainError::InvalidConfig(format!("shape mismatch for {name}")));
        }
        let mut m = state.m[i].clone();
        let mut v = state.v[i].clone();
        let mut next = p.clone();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]) + c.weight_decay * p.data()[k];
            let mk = c.beta1 * m.data()[k] + (1.0 - c.beta1) * gk;
            let vk = c.beta2 * v.data()[k] + (1.0 - c.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let step = c.lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
            next.data_mut()[k] -= step;
        }
        if !next.is_finite() || !v.is_finite() {
            return Err(TrainError::NonFiniteUpdate { param: name.to_string() });
        }
        staged.push((m, v, next));
    }
    for (i, ((_, p), (m, v, next))) in params.iter_mut().zip(staged).enumerate() {
        *p = next;
        state.m[i] = m;
        state.v[i] = v;
    }
    state.t = t;
    Ok(())
}
