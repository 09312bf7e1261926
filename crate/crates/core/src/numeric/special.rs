use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log Σ exp(v_j)`, shifted by the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("logsumexp of an empty vector".into()));
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp_unchecked(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Log density of `N(0, I_d)` at `z`.
pub fn log_std_normal(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * LN_2PI - 0.5 * sq
}

/// Log density of the scalar normal `N(mean, var)` at `x`.
pub fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
}
