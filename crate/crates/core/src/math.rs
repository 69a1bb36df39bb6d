//! Scalar and Gaussian helpers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Log of zero. Addition with it is absorbing.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn ln_factorial(n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    if n <= 20 {
        return ((2..=n as u64).product::<u64>() as f64).ln();
    }
    ln_gamma(n as f64 + 1.0)
}

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    if k == 0 || k == n {
        return 0.0;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn poisson_log_pmf(k: usize, rate: f64) -> f64 {
    if rate == 0.0 {
        return if k == 0 { 0.0 } else { LOG_ZERO };
    }
    k as f64 * rate.ln() - rate - ln_factorial(k)
}

/// `n · ln(p)` with the convention `0 · ln 0 = 0`.
pub fn xlny(n: f64, p: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n * p.ln()
    }
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == LOG_ZERO {
        return LOG_ZERO;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(LOG_ZERO, f64::max);
    if m == LOG_ZERO {
        return LOG_ZERO;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place to a probability vector; returns the
/// log of their sum.
pub fn normalize_log_weights(log_w: &[f64]) -> (Vec<f64>, f64) {
    let total = log_sum_exp(log_w);
    let probs = log_w.iter().map(|w| (w - total).exp()).collect();
    (probs, total)
}

/// Cholesky-backed 4-dimensional Gaussian.
#[derive(Debug, Clone)]
pub struct Gaussian4 {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    chol_l: Matrix4<f64>,
    ln_det: f64,
}

impl Gaussian4 {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>) -> Result<Self> {
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("covariance not positive-definite: {cov}")))?;
        let chol_l = chol.l();
        let ln_det = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol_l,
            ln_det,
        })
    }

    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &Vector4<f64>) -> f64 {
        let d = x - self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&d)
            .expect("cholesky factor is non-singular");
        z.norm_squared()
    }

    pub fn log_pdf(&self, x: &Vector4<f64>) -> f64 {
        -0.5 * (4.0 * LN_2PI + self.ln_det + self.mahalanobis_sq(x))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector4<f64> {
        let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.mean + self.chol_l * z
    }
}

pub fn spd_inverse(m: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numeric(format!("matrix not positive-definite: {m}")))
}

pub fn spd_ln_det(m: &Matrix4<f64>) -> Result<f64> {
    let c = m
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("matrix not positive-definite: {m}")))?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Log-density of a diagonal Gaussian.
pub fn log_normal_diag(x: &Vector4<f64>, mean: &Vector4<f64>, var: &Vector4<f64>) -> f64 {
    (0..4)
        .map(|d| {
            let r = x[d] - mean[d];
            -0.5 * (LN_2PI + var[d].ln() + r * r / var[d])
        })
        .sum()
}

/// Log-density of a dense multivariate Gaussian of any dimension.
pub fn log_normal_dense(x: &DVector<f64>, mean: &DVector<f64>, cov: DMatrix<f64>) -> Result<f64> {
    let n = x.len() as f64;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("joint covariance not positive-definite".into()))?;
    let l = chol.l();
    let ln_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let z = l
        .solve_lower_triangular(&(x - mean))
        .ok_or_else(|| Error::Numeric("singular cholesky factor".into()))?;
    Ok(-0.5 * (n * LN_2PI + ln_det + z.norm_squared()))
}

pub fn normal_log_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * ((2.0 * PI * var).ln() + r * r / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn binomial_and_poisson() {
        assert_relative_eq!(ln_binomial(3, 2), 3f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(ln_binomial(6, 3), 20f64.ln(), epsilon = 1e-12);
        assert_eq!(ln_binomial(5, 0), 0.0);
        assert_relative_eq!(poisson_log_pmf(0, 0.5), -0.5, epsilon = 1e-15);
        assert_eq!(poisson_log_pmf(0, 0.0), 0.0);
        assert_eq!(poisson_log_pmf(2, 0.0), LOG_ZERO);
    }

    #[test]
    fn log_sum_exp_handles_sentinel() {
        assert_eq!(log_sum_exp(&[LOG_ZERO, LOG_ZERO]), LOG_ZERO);
        assert_relative_eq!(log_sum_exp(&[0.0, LOG_ZERO]), 0.0);
        assert_relative_eq!(log_add_exp(1.0, 1.0), 1.0 + 2f64.ln(), epsilon = 1e-14);
        assert_eq!(LOG_ZERO + 3.0, LOG_ZERO);
    }

    #[test]
    fn gaussian4_matches_diag_formula() {
        let var = Vector4::new(1.0, 2.0, 0.5, 4.0);
        let mean = Vector4::new(1.0, -1.0, 0.0, 2.0);
        let g = Gaussian4::new(mean, Matrix4::from_diagonal(&var)).unwrap();
        let x = Vector4::new(0.3, 0.1, -0.7, 5.0);
        assert_relative_eq!(g.log_pdf(&x), log_normal_diag(&x, &mean, &var), epsilon = 1e-12);
        assert_relative_eq!(g.log_pdf(&mean), -2.0 * LN_2PI - 0.5 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn dense_matches_gaussian4() {
        let cov = crate::types::box_covariance(3.0, 1.0);
        let mean = Vector4::new(1.0, 2.0, 3.0, 4.0);
        let x = Vector4::new(0.0, 2.5, 3.5, 3.0);
        let g = Gaussian4::new(mean, cov).unwrap();
        let dense = log_normal_dense(
            &DVector::from_column_slice(x.as_slice()),
            &DVector::from_column_slice(mean.as_slice()),
            DMatrix::from_column_slice(4, 4, cov.as_slice()),
        )
        .unwrap();
        assert_relative_eq!(g.log_pdf(&x), dense, epsilon = 1e-12);
    }
}
