//! Slice-level kernels shared by the layers.
//!
//! Matrices are row-major. The `*_acc` kernels accumulate into their output,
//! which is what every backward pass wants.

use rand::Rng;

use super::array::NumArray;
use super::SeededRng;
use crate::error::{Error, Result};

/// `c[n,m] += a[n,k] · b[k,m]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[k,m] += a[n,k]ᵀ · b[n,m]`
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(c.len(), k * m);
    for i in 0..n {
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[n,k] += a[n,m] · b[k,m]ᵀ`
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * k);
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for p in 0..k {
            c[i * k + p] += dot(a_row, &b[p * m..(p + 1) * m]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y[m] += x[k] · w[k,m]`
#[inline]
pub fn vecmat_acc(x: &[f64], w: &[f64], y: &mut [f64]) {
    gemm_acc(x, w, y, 1, x.len(), y.len());
}

/// `gw[k,m] += x[k] ⊗ dy[m]`
#[inline]
pub fn outer_acc(x: &[f64], dy: &[f64], gw: &mut [f64]) {
    gemm_tn_acc(x, dy, gw, 1, x.len(), dy.len());
}

/// `dx[k] += w[k,m] · dy[m]`
#[inline]
pub fn matvec_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    gemm_nt_acc(dy, w, dx, 1, dy.len(), dx.len());
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically stable softmax over a slice (max subtraction).
pub fn softmax_slice(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySequence("softmax"));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input contains NaN".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn softmax(x: &NumArray) -> Result<NumArray> {
    Ok(NumArray::vector(&softmax_slice(x.data())?))
}

/// Given softmax output `w` and upstream `dw`, the gradient wrt the logits.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let inner = dot(w, dw);
    w.iter().zip(dw).map(|(wi, dwi)| wi * (dwi - inner)).collect()
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-rate)`.
///
/// With `training == false` the mask is all ones and no randomness is drawn.
pub fn dropout_mask(shape: &[usize], rate: f64, training: bool, rng: &mut SeededRng) -> Result<NumArray> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut mask = NumArray::filled(shape, 1.0);
    if !training || rate == 0.0 {
        return Ok(mask);
    }
    let keep = 1.0 / (1.0 - rate);
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    Ok(mask)
}
