//! Effective sample size and systematic resampling.

use rand::Rng;

use crate::error::{Error, Result};

/// `1 / Σ ŵ²` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
/// Returns the ancestor index of each offspring, in non-decreasing order.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric("degenerate particle set".into()));
    }
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut ancestors = Vec::with_capacity(n);
    let mut acc = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u >= acc && i + 1 < n {
            i += 1;
            acc += weights[i];
        }
        ancestors.push(i);
        u += step;
    }
    Ok(ancestors)
}
