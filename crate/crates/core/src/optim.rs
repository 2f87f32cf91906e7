//! Adam, global-norm gradient clipping and cosine learning-rate decay.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("optimizer holds {expected} moment buffers but received {actual} parameters")]
    ParamCount { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update. Each gradient is consumed: it is cleared
/// once applied.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, lr: f64) -> Result<(), OptimError> {
    if params.len() != state.m.len() {
        return Err(OptimError::ParamCount {
            expected: state.m.len(),
            actual: params.len(),
        });
    }
    if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
        return Err(OptimError::MissingGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - math::powi(state.beta1, t);
    let c2 = 1.0 - math::powi(state.beta2, t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * g[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            *x -= lr * mhat / (math::sqrt(vhat) + eps);
        }
        p.clear_grad();
    }
    Ok(())
}

/// Global gradient norm over all parameters.
pub fn grad_norm(params: &[&mut Tensor]) -> f64 {
    math::sqrt(
        params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum(),
    )
}

/// Rescales all gradients by `min(1, max_norm/‖g‖)`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Cosine decay from `lr_max` at `iter = 0` to `lr_min` at `iter = total`.
pub fn lr_schedule(iter: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (iter.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math::cos(core::f64::consts::PI * frac))
}
