//! AdamW with decoupled weight decay and a step-wise learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Float = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> OptimState<T> {
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> Self {
        OptimState {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One AdamW update at learning rate `lr`. Parameters with `decay[i] ==
/// false` (biases, normalization affine terms) skip weight decay. Decay is
/// applied directly to the weights and never enters the moment estimates.
pub fn adamw_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n {
        return Err(Error::shape(format!(
            "adamw: {n} params, {} grads, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "adamw param {i}: {:?} vs grad {:?} vs moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..n {
        let wd = if decay[i] { c.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in params[i]
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g.as_f64();
            let mn = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
            let vn = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
            let wv = w.as_f64();
            *w = T::from_f64(wv - lr * wd * wv - lr * update);
        }
    }
    Ok(())
}

/// Constant `base` for the first half of `total` steps, then cosine decay to
/// `base / 20` at the final step.
pub fn learning_rate(base: f64, step: u64, total: u64) -> f64 {
    let floor = base / 20.0;
    let half = total / 2;
    if total == 0 || step <= half {
        return base;
    }
    let span = (total - half).max(1) as f64;
    let frac = ((step - half) as f64 / span).min(1.0);
    floor + 0.5 * (base - floor) * (1.0 + (PI * frac).cos())
}
