//! Forward-only reference implementations on plain slices.
//!
//! The differentiable graph ops reuse these kernels row by row so that the
//! taped and untaped paths agree bit for bit.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::dimension(format!(
            "layer_norm lengths x={}, gamma={}, beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out`; returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_into(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
    }
    inv_std
}

/// Numerically stable softmax. Rejects non-finite input.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::dimension("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax input contains NaN or Inf"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log(sum(exp(x)))`, stable.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
