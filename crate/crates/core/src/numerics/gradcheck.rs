//! Central-difference gradient checking.

use super::array::NumArray;
use super::param::{Grads, ParamSet};
use crate::error::{Error, Result};

/// Something with a scalar loss and a hand-written gradient.
pub trait GradTarget {
    fn loss(&self, ps: &ParamSet, inputs: &[NumArray]) -> Result<f64>;

    /// Analytic gradients with respect to every parameter and every input.
    fn gradients(&self, ps: &ParamSet, inputs: &[NumArray]) -> Result<(Grads, Vec<NumArray>)>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, e.g. `param enc.w[3]` or `input 0[7]`.
    pub worst: String,
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Gradient magnitude below which the comparison becomes absolute; central
/// differences cannot resolve smaller values through round-off.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients against `(L(θ+ε) − L(θ−ε)) / 2ε` on every
/// parameter and input coordinate.
pub fn grad_check(
    target: &dyn GradTarget,
    ps: &ParamSet,
    inputs: &[NumArray],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (grads, input_grads) = target.gradients(ps, inputs)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let mut record = |analytic: f64, numeric: f64, what: &dyn Fn() -> String| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at {}", what())));
        }
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = e.max(report.max_rel_err);
            report.worst = what();
            report.worst_values = (analytic, numeric);
        }
        Ok(())
    };

    let mut probe = ps.clone();
    for id in ps.ids() {
        let n = ps.value(id).len();
        for j in 0..n {
            let orig = ps.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + epsilon;
            let up = target.loss(&probe, inputs)?;
            probe.value_mut(id).data_mut()[j] = orig - epsilon;
            let down = target.loss(&probe, inputs)?;
            probe.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let name = &ps.param(id).name;
            record(grads.get(id).data()[j], numeric, &|| format!("param {name}[{j}]"))?;
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe_inputs[k].data_mut()[j] = orig + epsilon;
            let up = target.loss(ps, &probe_inputs)?;
            probe_inputs[k].data_mut()[j] = orig - epsilon;
            let down = target.loss(ps, &probe_inputs)?;
            probe_inputs[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            record(input_grads[k].data()[j], numeric, &|| format!("input {k}[{j}]"))?;
        }
    }
    Ok(report)
}

/// Fixed random weighting `L = Σ y ⊙ R`, so `dL/dy = R`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weights: NumArray,
}

impl Projection {
    pub fn new(shape: &[usize], rng: &mut super::SeededRng) -> Self {
        Projection {
            weights: super::param::uniform(shape, 1.0, rng),
        }
    }

    pub fn apply(&self, y: &NumArray) -> f64 {
        super::ops::dot(y.data(), self.weights.data())
    }
}
