//! Log-densities of the generative model: object dynamics, association
//! prior, new-object prior and the anchor emission model.
//!
//! All densities carry their normalizing constants, so they integrate to one.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::math::{
    ln_binomial, ln_gamma, log_normal_dense, log_normal_diag, log_sum_exp, poisson_log_pmf, xlny,
    Gaussian4, LOG_ZERO,
};
use crate::types::{
    AnchorObservation, AssociationResult, BBox, Cluster, FrameObservations, ModelParams,
    MotionParams, ObjectState,
};

/// Where an anchor came from under one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorAssignment {
    /// Index into the frame's object list.
    Object(usize),
    Clutter,
}

/// Predicted mean `A·L + b` and per-coordinate variance `exp(2s)`.
pub fn motion_predict(bbox: &BBox, motion: &MotionParams) -> (Vector4<f64>, Vector4<f64>) {
    (motion.a * bbox.to_vector() + motion.b, motion.variance())
}

pub fn transition_log_prob(next: &BBox, prev: &BBox, motion: &MotionParams) -> f64 {
    let (mean, var) = motion_predict(prev, motion);
    log_normal_diag(&next.to_vector(), &mean, &var)
}

/// Gradient of [`transition_log_prob`] with respect to `(A, b, s)`.
pub fn transition_log_prob_gradient(next: &BBox, prev: &BBox, motion: &MotionParams) -> MotionParams {
    let prev_v = prev.to_vector();
    let (mean, var) = motion_predict(prev, motion);
    let resid = next.to_vector() - mean;
    let scaled = resid.component_div(&var);
    MotionParams {
        a: scaled * prev_v.transpose(),
        b: scaled,
        s: Vector4::from_fn(|d, _| resid[d] * scaled[d] - 1.0),
    }
}

/// Survival/death of `k_prev` objects and Poisson arrivals of `k_new`.
pub fn birth_death_log_prob(
    k_prev: usize,
    k_survived: usize,
    k_new: usize,
    params: &ModelParams,
) -> Result<f64> {
    if k_survived > k_prev {
        return Err(Error::Domain(format!(
            "{k_survived} survivors out of {k_prev} previous objects"
        )));
    }
    Ok(xlny((k_prev - k_survived) as f64, params.lambda_death)
        + xlny(k_survived as f64, 1.0 - params.lambda_death)
        + poisson_log_pmf(k_new, params.lambda_birth))
}

/// Uniform prior over which of `k_total_new` objects are the survivors.
pub fn association_log_prior(k_survived: usize, k_total_new: usize) -> Result<f64> {
    if k_survived > k_total_new {
        return Err(Error::Domain(format!(
            "{k_survived} survivors exceed {k_total_new} objects"
        )));
    }
    Ok(-ln_binomial(k_total_new, k_survived))
}

/// Gaussian location prior plus uniform class prior for a newborn object.
pub fn new_object_log_prior(bbox: &BBox, class_id: usize, params: &ModelParams) -> Result<f64> {
    if class_id >= params.num_classes {
        return Err(Error::Domain(format!(
            "class {class_id} out of range for {} classes",
            params.num_classes
        )));
    }
    let g = Gaussian4::new(params.prior_mean, params.prior_cov)?;
    Ok(g.log_pdf(&bbox.to_vector()) - (params.num_classes as f64).ln())
}

/// `ln Γ(K + α) - ln Γ(α + 1)`: log normalizer of the class Dirichlet.
pub fn dirichlet_log_norm(num_classes: usize, alpha: f64) -> f64 {
    ln_gamma(num_classes as f64 + alpha) - ln_gamma(alpha + 1.0)
}

/// `ln Dir(scores; α+1 at the true class, 1 elsewhere)`.
pub fn class_emission_log_prob(class_scores: &[f64], true_class: usize, alpha: f64) -> f64 {
    let p = class_scores[true_class];
    if p <= 0.0 && alpha > 0.0 {
        return LOG_ZERO;
    }
    dirichlet_log_norm(class_scores.len(), alpha) + xlny(alpha, p)
}

/// Beta emission of the appearance score: `Beta(α+1, 1)` for anchors of real
/// objects, `Beta(1, α+1)` for clutter.
pub fn appearance_emission_log_prob(e: f64, is_real: bool, alpha: f64) -> Result<f64> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::Domain(format!("appearance {e} outside (0, 1)")));
    }
    let x = if is_real { e } else { 1.0 - e };
    Ok((alpha + 1.0).ln() + xlny(alpha, x))
}

/// `ln N(anchor; object, scatter)`.
pub fn location_emission_log_prob(
    anchor_box: &BBox,
    object_box: &BBox,
    scatter: &Matrix4<f64>,
) -> Result<f64> {
    Ok(Gaussian4::new(object_box.to_vector(), *scatter)?.log_pdf(&anchor_box.to_vector()))
}

/// Location and class log-marginal of a group of clutter anchors that share
/// one latent clutter source with the new-object priors, with the location
/// integrated out jointly over the stacked anchor boxes.
pub fn clutter_log_marginal(
    anchors: &[&AnchorObservation],
    scatter: &Matrix4<f64>,
    params: &ModelParams,
) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let m = anchors.len();
    let dim = 4 * m;
    let mut x = DVector::zeros(dim);
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    for (i, a) in anchors.iter().enumerate() {
        for d in 0..4 {
            x[4 * i + d] = a.bbox.0[d];
            mean[4 * i + d] = params.prior_mean[d];
        }
        for j in 0..m {
            for r in 0..4 {
                for c in 0..4 {
                    let mut v = params.prior_cov[(r, c)];
                    if i == j {
                        v += scatter[(r, c)];
                    }
                    cov[(4 * i + r, 4 * j + c)] = v;
                }
            }
        }
    }
    let location = log_normal_dense(&x, &mean, cov)?;

    let k = params.num_classes;
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            anchors
                .iter()
                .map(|a| class_emission_log_prob(&a.class_scores, c, params.alpha))
                .sum::<f64>()
                - (k as f64).ln()
        })
        .collect();
    Ok(location + log_sum_exp(&per_class))
}

/// Log of the joint transition: association prior, birth/death, matched
/// motion terms and new-object priors. Indices in `assoc.matches` are
/// `(prev index, next index)`.
pub fn joint_transition_log_prob(
    prev: &[ObjectState],
    next: &[ObjectState],
    assoc: &AssociationResult,
    params: &ModelParams,
) -> Result<f64> {
    let k_hat = assoc.matches.len();
    if k_hat > prev.len() || k_hat > next.len() {
        return Err(Error::Input("association larger than object sets".into()));
    }
    let mut matched_next = vec![false; next.len()];
    let mut total = association_log_prior(k_hat, next.len())?
        + birth_death_log_prob(prev.len(), k_hat, next.len() - k_hat, params)?;
    for &(p, n) in &assoc.matches {
        if p >= prev.len() || n >= next.len() || matched_next[n] {
            return Err(Error::Input(format!("inconsistent association pair ({p}, {n})")));
        }
        matched_next[n] = true;
        if prev[p].class_id != next[n].class_id {
            return Ok(LOG_ZERO);
        }
        total += transition_log_prob(&next[n].bbox, &prev[p].bbox, &params.motion);
    }
    for (n, obj) in next.iter().enumerate() {
        if !matched_next[n] {
            total += new_object_log_prior(&obj.bbox, obj.class_id, params)?;
        }
    }
    Ok(total)
}

/// Log of the joint emission of a frame's anchors given objects, clusters
/// and a per-anchor assignment.
///
/// Real anchors contribute their Beta, Dirichlet and Gaussian location terms
/// (location scatter taken from the anchor's cluster). Clutter anchors
/// contribute their Beta term and, grouped by cluster, the clutter marginal.
pub fn joint_emission_log_prob(
    frame: &FrameObservations,
    clusters: &[Cluster],
    objects: &[ObjectState],
    assignment: &[AnchorAssignment],
    params: &ModelParams,
) -> Result<f64> {
    if assignment.len() != frame.anchors.len() {
        return Err(Error::Input(format!(
            "{} assignments for {} anchors",
            assignment.len(),
            frame.anchors.len()
        )));
    }
    let mut cluster_of = vec![usize::MAX; frame.anchors.len()];
    for (ci, c) in clusters.iter().enumerate() {
        for &a in &c.anchor_indices {
            cluster_of[a] = ci;
        }
    }
    if cluster_of.contains(&usize::MAX) {
        return Err(Error::Input("anchor not covered by any cluster".into()));
    }

    let mut total = 0.0;
    let mut clutter_groups: Vec<Vec<&AnchorObservation>> = vec![Vec::new(); clusters.len()];
    for (i, (anchor, who)) in frame.anchors.iter().zip(assignment).enumerate() {
        match *who {
            AnchorAssignment::Object(j) => {
                let obj = objects
                    .get(j)
                    .ok_or_else(|| Error::Input(format!("anchor {i} assigned to missing object {j}")))?;
                total += appearance_emission_log_prob(anchor.appearance, true, params.alpha)?
                    + class_emission_log_prob(&anchor.class_scores, obj.class_id, params.alpha)
                    + location_emission_log_prob(
                        &anchor.bbox,
                        &obj.bbox,
                        &clusters[cluster_of[i]].scatter,
                    )?;
            }
            AnchorAssignment::Clutter => {
                total += appearance_emission_log_prob(anchor.appearance, false, params.alpha)?;
                clutter_groups[cluster_of[i]].push(anchor);
            }
        }
    }
    for (ci, group) in clutter_groups.iter().enumerate() {
        total += clutter_log_marginal(group, &clusters[ci].scatter, params)?;
    }
    Ok(total)
}
