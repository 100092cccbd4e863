//! Adam with bias correction, the Noam learning-rate schedule and global-norm
//! gradient clipping.

use super::array::NumArray;
use super::param::{Grads, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// First moments, aligned with the parameter set's ids.
    pub m: Vec<NumArray>,
    /// Second moments.
    pub v: Vec<NumArray>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| NumArray::zeros(p.value.shape())).collect();
        OptimizerState {
            step: 0,
            beta1,
            beta2,
            epsilon,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// A parameter whose whole gradient is zero this step is left untouched,
/// moments included. Gradients are zeroed afterwards.
pub fn adam_step(params: &mut ParamSet, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if opt.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("optimizer tracks {} params, model has {}", opt.m.len(), params.len()),
        ));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}` at optimizer step {}",
                p.name,
                opt.step + 1
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        if p.grad.data().iter().all(|g| *g == 0.0) {
            continue;
        }
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

/// `peak · w^0.5 · min(step · w^-1.5, step^-0.5)`: linear warmup to `peak`
/// at `step == w`, then inverse square-root decay.
pub fn noam_lr(step: u64, sched: &LrSchedule) -> Result<f64> {
    if step < 1 {
        return Err(Error::InvalidArgument("noam_lr is defined for step >= 1".into()));
    }
    if sched.warmup_steps < 1 {
        return Err(Error::InvalidArgument("warmup_steps must be >= 1".into()));
    }
    let s = step as f64;
    let w = sched.warmup_steps as f64;
    if step == sched.warmup_steps {
        return Ok(sched.peak_lr);
    }
    Ok(sched.peak_lr * w.sqrt() * (s * w.powf(-1.5)).min(s.powf(-0.5)))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
