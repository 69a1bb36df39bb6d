//! Per-cluster inclusion/class sampling and conjugate Gaussian proposals.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;

use crate::error::Result;
use crate::math::{spd_inverse, Gaussian4};
use crate::model::motion_predict;
use crate::types::{BBox, Cluster, ModelParams, MotionParams, ObjectState};

/// Outcome of the inclusion and class draws for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterDraw {
    pub included: bool,
    pub class_id: usize,
}

/// Draws inclusion with probability `p_i` and a class from `c_i` for every
/// cluster. The class is drawn even for excluded clusters so the number of
/// draws does not depend on the outcome.
pub fn initial_sample<R: Rng + ?Sized>(clusters: &[Cluster], rng: &mut R) -> Vec<ClusterDraw> {
    clusters
        .iter()
        .map(|c| {
            let included = rng.random::<f64>() < c.inclusion_prob;
            let class_id = sample_categorical(&c.fused_class, rng);
            ClusterDraw { included, class_id }
        })
        .collect()
}

/// Objects created by [`initial_sample`]: box at the cluster mean and track id
/// `next_track_id + cluster index`.
pub fn initial_objects(clusters: &[Cluster], draws: &[ClusterDraw], next_track_id: u64) -> Vec<ObjectState> {
    clusters
        .iter()
        .zip(draws)
        .enumerate()
        .filter(|(_, (_, d))| d.included)
        .map(|(i, (c, d))| ObjectState::new(c.mean, d.class_id, next_track_id + i as u64))
        .collect()
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding at the top end: last class with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Gaussian posterior of a box given a Gaussian prior and the `M` anchors of
/// a cluster, each `N(box, scatter)`.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

/// `Σ' = (P⁻¹ + M·Σ(B)⁻¹)⁻¹`, `μ' = Σ'(P⁻¹·prior_mean + M·Σ(B)⁻¹·μ(B))`.
///
/// Evaluated through the equivalent forms `Σ' = R(P + R)⁻¹P` and
/// `μ' = μ(B) + R(P + R)⁻¹(prior_mean - μ(B))` with `R = Σ(B)/M`, which stay
/// accurate when the scatter is close to singular.
pub fn fuse(prior_mean: &Vector4<f64>, prior_cov: &Matrix4<f64>, cluster: &Cluster) -> Result<Posterior> {
    let r = cluster.scatter / cluster.count as f64;
    let gain = r * spd_inverse(&(prior_cov + r))?;
    let cov = gain * prior_cov;
    let center = cluster.mean.to_vector();
    Ok(Posterior {
        mean: center + gain * (prior_mean - center),
        cov: (cov + cov.transpose()) * 0.5,
    })
}

/// Posterior for a cluster matched to a previous object: motion prediction
/// fused with the cluster.
pub fn matched_posterior(prev: &BBox, cluster: &Cluster, motion: &MotionParams) -> Result<Posterior> {
    let (mean, var) = motion_predict(prev, motion);
    fuse(&mean, &Matrix4::from_diagonal(&var), cluster)
}

/// Posterior for an unmatched cluster: new-object prior fused with the cluster.
pub fn unmatched_posterior(cluster: &Cluster, params: &ModelParams) -> Result<Posterior> {
    fuse(&params.prior_mean, &params.prior_cov, cluster)
}

/// A proposed box with its covariance and proposal log-density.
#[derive(Debug, Clone)]
pub struct ProposalSample {
    pub bbox: BBox,
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub log_density: f64,
}

fn draw<R: Rng + ?Sized>(post: Posterior, rng: &mut R) -> Result<ProposalSample> {
    let g = Gaussian4::new(post.mean, post.cov)?;
    let x = g.sample(rng);
    Ok(ProposalSample {
        bbox: BBox::from_vector(&x),
        log_density: g.log_pdf(&x),
        mean: post.mean,
        cov: post.cov,
    })
}

pub fn proposal_update_matched<R: Rng + ?Sized>(
    prev: &ObjectState,
    cluster: &Cluster,
    motion: &MotionParams,
    rng: &mut R,
) -> Result<ProposalSample> {
    draw(matched_posterior(&prev.bbox, cluster, motion)?, rng)
}

pub fn proposal_update_unmatched<R: Rng + ?Sized>(
    cluster: &Cluster,
    params: &ModelParams,
    rng: &mut R,
) -> Result<ProposalSample> {
    draw(unmatched_posterior(cluster, params)?, rng)
}
