//! Closed-form importance weights.
//!
//! With the conjugate proposals, the location of every proposed box integrates
//! out of the weight. What remains per particle is the dynamics count terms,
//! the association prior and, per matched cluster, the ratio of the cluster's
//! predictive density under the motion prior to the one under the new-object
//! prior. Per-cluster constants that do not depend on the particle are
//! collected in [`cluster_log_constant`].

use nalgebra::{Matrix4, Vector4};

use crate::error::Result;
use crate::math::{ln_binomial, log_add_exp, log_sum_exp, poisson_log_pmf, spd_inverse, spd_ln_det, xlny, LN_2PI};
use crate::model::{dirichlet_log_norm, motion_predict};
use crate::types::{AnchorObservation, BBox, Cluster, ModelParams};

/// Per-particle log-weight from the object counts and the matched-cluster
/// factors of [`matched_log_factor`].
///
/// `k_prev` previous objects, `k_matched` of them matched, `k_total` objects
/// after the step.
pub fn importance_weight(
    k_prev: usize,
    k_matched: usize,
    k_total: usize,
    matched_factors: f64,
    params: &ModelParams,
) -> f64 {
    xlny((k_prev - k_matched) as f64, params.lambda_death)
        + xlny(k_matched as f64, 1.0 - params.lambda_death)
        + poisson_log_pmf(k_total - k_matched, params.lambda_birth)
        - ln_binomial(k_total, k_matched)
        + matched_factors
}

/// `ln K + ln c_i[C] - R/2 + ln τ` for a cluster matched to an object of class
/// `class_id` at `prev`.
///
/// With `G` the motion covariance, `m` the motion mean, `x̄` the cluster mean
/// and `S = Σ(B)/M`, the quadratic term and the determinant ratio of the
/// matched and unmatched posteriors reduce to
///
/// `R = (m-x̄)ᵀ(G+S)⁻¹(m-x̄) - (μ0-x̄)ᵀ(Σ0+S)⁻¹(μ0-x̄)`
///
/// `ln τ = ½(ln|Σ0+S| - ln|G+S|)`.
pub fn matched_log_factor(
    prev: &BBox,
    class_id: usize,
    cluster: &Cluster,
    params: &ModelParams,
) -> Result<f64> {
    let log_class = cluster.log_fused_class[class_id];
    if log_class == f64::NEG_INFINITY {
        return Ok(log_class);
    }
    let (m, var) = motion_predict(prev, &params.motion);
    let center = cluster.mean.to_vector();
    let s = cluster.scatter / cluster.count as f64;
    let motion_cov = Matrix4::from_diagonal(&var) + s;
    let prior_cov = params.prior_cov + s;

    let dm: Vector4<f64> = m - center;
    let d0: Vector4<f64> = params.prior_mean - center;
    let r = dm.dot(&(spd_inverse(&motion_cov)? * dm)) - d0.dot(&(spd_inverse(&prior_cov)? * d0));
    let ln_tau = 0.5 * (spd_ln_det(&prior_cov)? - spd_ln_det(&motion_cov)?);

    Ok((params.num_classes as f64).ln() + log_class - 0.5 * r + ln_tau)
}

/// Log-weight terms of one cluster that every particle shares, whatever it
/// decided for the cluster: the Beta and Dirichlet normalizers, the
/// new-object predictive density of the cluster mean and the within-cluster
/// spread of the anchors.
pub fn cluster_log_constant(
    anchors: &[&AnchorObservation],
    cluster: &Cluster,
    params: &ModelParams,
) -> Result<f64> {
    let m = anchors.len() as f64;
    let alpha = params.alpha;
    let k = params.num_classes;

    let real: f64 = anchors.iter().map(|a| xlny(alpha, a.appearance)).sum();
    let clutter: f64 = anchors.iter().map(|a| xlny(alpha, 1.0 - a.appearance)).sum();
    let appearance = m * (alpha + 1.0).ln() + log_add_exp(real, clutter);

    let logits: Vec<f64> = (0..k)
        .map(|c| anchors.iter().map(|a| xlny(alpha, a.class_scores[c])).sum())
        .collect();
    let class = m * dirichlet_log_norm(k, alpha) + log_sum_exp(&logits) - (k as f64).ln();

    let mean = cluster.mean.to_vector();
    let predictive_cov = params.prior_cov + cluster.scatter / m;
    let d = mean - params.prior_mean;
    let predictive = -0.5
        * (4.0 * LN_2PI + spd_ln_det(&predictive_cov)? + d.dot(&(spd_inverse(&predictive_cov)? * d)));

    let scatter_inv = spd_inverse(&cluster.scatter)?;
    let spread: f64 = anchors
        .iter()
        .map(|a| {
            let r = a.bbox.to_vector() - mean;
            r.dot(&(scatter_inv * r))
        })
        .sum();
    let within = -2.0 * (m - 1.0) * LN_2PI - 0.5 * (m - 1.0) * spd_ln_det(&cluster.scatter)?
        - 2.0 * m.ln()
        - 0.5 * spread;

    Ok(appearance + class + predictive + within)
}
