//! Independent reference computations for the filter: direct density-ratio
//! weights, Kalman evidence and quadrature posterior moments.
//!
//! These recompute everything from raw anchors and model densities without
//! going through the filter's closed forms.

#![allow(dead_code)]

use d2t_core::filter::{Particle, TransitionRecord};
use d2t_core::model::{joint_emission_log_prob, joint_transition_log_prob, AnchorAssignment};
use d2t_core::{AnchorObservation, AssociationResult, BBox, Cluster, FrameObservations, ModelParams, ObjectState};
use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian log-density through the eigendecomposition of the covariance.
pub fn gauss_logpdf(x: &Vector4<f64>, mean: &Vector4<f64>, cov: &Matrix4<f64>) -> f64 {
    let eig = cov.symmetric_eigen();
    let d = x - mean;
    let mut total = 4.0 * LN_2PI;
    for i in 0..4 {
        let lambda = eig.eigenvalues[i];
        let proj = eig.eigenvectors.column(i).dot(&d);
        total += lambda.ln() + proj * proj / lambda;
    }
    -0.5 * total
}

/// Cluster mean and `α`-scaled scatter with ridge, from raw anchor boxes
/// (second moments taken about the mean).
pub fn mean_and_scatter(boxes: &[Vector4<f64>], alpha: f64, eps: f64) -> (Vector4<f64>, Matrix4<f64>) {
    let m = boxes.len() as f64;
    let mean = boxes.iter().sum::<Vector4<f64>>() / m;
    let second = boxes
        .iter()
        .map(|b| (b - mean) * (b - mean).transpose())
        .sum::<Matrix4<f64>>()
        / m;
    let cov = second * alpha + Matrix4::identity() * eps;
    (mean, (cov + cov.transpose()) * 0.5)
}

/// Kalman-gain form of the Gaussian posterior for prior `N(m, P)` and one
/// observation `y ~ N(x, R)`, with the Joseph covariance update.
pub fn kalman_posterior(
    m: &Vector4<f64>,
    p: &Matrix4<f64>,
    y: &Vector4<f64>,
    r: &Matrix4<f64>,
) -> (Vector4<f64>, Matrix4<f64>) {
    let s = p + r;
    let k = p * s.try_inverse().expect("invertible innovation covariance");
    let mean = m + k * (y - m);
    let i_k = Matrix4::identity() - k;
    let cov = i_k * p * i_k.transpose() + k * r * k.transpose();
    (mean, (cov + cov.transpose()) * 0.5)
}

fn cluster_boxes(frame: &FrameObservations, cluster: &Cluster) -> Vec<Vector4<f64>> {
    cluster.anchor_indices.iter().map(|&i| frame.anchors[i].bbox.to_vector()).collect()
}

/// Log-probability that the proposal includes / excludes a cluster, from the
/// raw appearance scores.
fn log_inclusion(anchors: &[&AnchorObservation], alpha: f64, included: bool) -> f64 {
    let real: f64 = anchors.iter().map(|a| a.appearance.powf(alpha)).product();
    let clutter: f64 = anchors.iter().map(|a| (1.0 - a.appearance).powf(alpha)).product();
    if included {
        (real / (real + clutter)).ln()
    } else {
        (clutter / (real + clutter)).ln()
    }
}

fn log_class_proposal(anchors: &[&AnchorObservation], alpha: f64, class_id: usize) -> f64 {
    let k = anchors[0].class_scores.len();
    let un: Vec<f64> = (0..k)
        .map(|c| anchors.iter().map(|a| a.class_scores[c].powf(alpha)).product())
        .collect();
    (un[class_id] / un.iter().sum::<f64>()).ln()
}

/// `ln target - ln proposal` for one particle's step, with the target made of
/// the joint transition and joint emission densities at the sampled state and
/// the proposal made of the inclusion, class and box densities.
pub fn direct_log_ratio(
    prev: &[ObjectState],
    frame: &FrameObservations,
    clusters: &[Cluster],
    record: &TransitionRecord,
    next: &Particle,
    params: &ModelParams,
) -> f64 {
    // association in (prev, next object) indices
    let mut assoc = AssociationResult::default();
    for &(p, c) in &record.association.matches {
        let n = record.object_cluster.iter().position(|&x| x == c).expect("matched cluster is included");
        assoc.matches.push((p, n));
    }
    let transition = joint_transition_log_prob(prev, &next.objects, &assoc, params).unwrap();

    let mut assignment = vec![AnchorAssignment::Clutter; frame.anchors.len()];
    for (n, &c) in record.object_cluster.iter().enumerate() {
        for &a in &clusters[c].anchor_indices {
            assignment[a] = AnchorAssignment::Object(n);
        }
    }
    let emission = joint_emission_log_prob(frame, clusters, &next.objects, &assignment, params).unwrap();

    let mut proposal = 0.0;
    for (ci, cluster) in clusters.iter().enumerate() {
        let members: Vec<&AnchorObservation> = cluster.anchor_indices.iter().map(|&i| &frame.anchors[i]).collect();
        proposal += log_inclusion(&members, params.alpha, record.included[ci]);
    }
    for (n, &ci) in record.object_cluster.iter().enumerate() {
        let cluster = &clusters[ci];
        let members: Vec<&AnchorObservation> = cluster.anchor_indices.iter().map(|&i| &frame.anchors[i]).collect();
        let boxes = cluster_boxes(frame, cluster);
        let (mean, scatter) = mean_and_scatter(&boxes, params.alpha, params.eps_pd);
        let r = scatter / boxes.len() as f64;
        let obj = &next.objects[n];
        let (m, p) = match record.association.matches.iter().find(|&&(_, c)| c == ci) {
            Some(&(pi, _)) => {
                let g = params.motion.a * prev[pi].bbox.to_vector() + params.motion.b;
                let var = params.motion.s.map(|s| (2.0 * s).exp());
                (g, Matrix4::from_diagonal(&var))
            }
            None => {
                proposal += log_class_proposal(&members, params.alpha, obj.class_id);
                (params.prior_mean, params.prior_cov)
            }
        };
        let (pm, pc) = kalman_posterior(&m, &p, &mean, &r);
        proposal += gauss_logpdf(&obj.bbox.to_vector(), &pm, &pc);
    }
    transition + emission - proposal
}

pub fn normalize(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_w.iter().map(|w| (w - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Single-object linear-Gaussian scenario: one object with known state at the
/// labelled frame, no births or deaths, one anchor per frame.
#[derive(Debug, Clone)]
pub struct KalmanScenario {
    pub params: ModelParams,
    pub label: ObjectState,
    /// Frames after the labelled one, in time order.
    pub forward: Vec<FrameObservations>,
    /// Frames before the labelled one, in reverse time order.
    pub backward: Vec<FrameObservations>,
}

pub fn kalman_scenario(seed: u64, forward: usize, backward: usize) -> KalmanScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams {
        lambda_death: 0.0,
        lambda_birth: 0.0,
        alpha: 2.0,
        num_classes: 3,
        eps_pd: 4.0,
        motion: d2t_core::MotionParams::identity(3.0),
        iou_min: 0.1,
        ..ModelParams::default()
    };
    let class_id = 1;
    let start = Vector4::new(200.0, 150.0, 300.0, 230.0);
    let label = ObjectState::new(BBox::from_vector(&start), class_id, 0);
    let std = 3.0;
    let meas = params.eps_pd.sqrt();
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let mut x = start;
        (1..=n)
            .map(|t| {
                x += Vector4::from_fn(|_, _| std * rng.sample::<f64, _>(StandardNormal));
                let y = x + Vector4::from_fn(|_, _| meas * rng.sample::<f64, _>(StandardNormal));
                let e = rng.random_range(0.6..0.95);
                let mut k: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                k[class_id] += 1.0;
                let total: f64 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= total);
                FrameObservations {
                    frame_index: t,
                    anchors: vec![AnchorObservation::new(BBox::from_vector(&y), e, k).unwrap()],
                }
            })
            .collect::<Vec<_>>()
    };
    let fwd = make(forward, &mut rng);
    let bwd = make(backward, &mut rng);
    KalmanScenario {
        params,
        label,
        forward: fwd,
        backward: bwd,
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Exact log-evidence of the frames given the labelled object: Kalman
/// predictive densities plus the appearance and class emission terms.
pub fn kalman_log_evidence(params: &ModelParams, label: &ObjectState, frames: &[FrameObservations]) -> f64 {
    let alpha = params.alpha;
    let k = params.num_classes as f64;
    let var = params.motion.s.map(|s| (2.0 * s).exp());
    let q = Matrix4::from_diagonal(&var);
    let r = Matrix4::identity() * params.eps_pd;
    let mut m = label.bbox.to_vector();
    let mut p = Matrix4::zeros();
    let mut total = 0.0;
    for f in frames {
        assert_eq!(f.anchors.len(), 1);
        let a = &f.anchors[0];
        let y = a.bbox.to_vector();
        let pm = params.motion.a * m + params.motion.b;
        let pp = params.motion.a * p * params.motion.a.transpose() + q;
        total += gauss_logpdf(&y, &pm, &(pp + r));
        let (nm, np) = kalman_posterior(&pm, &pp, &y, &r);
        m = nm;
        p = np;
        total += (alpha + 1.0).ln() + alpha * a.appearance.ln();
        total += ln_gamma(k + alpha) - ln_gamma(alpha + 1.0) + alpha * a.class_scores[label.class_id].ln();
    }
    total
}

/// Unnormalized log-posterior of a box given a Gaussian prior and anchors
/// `N(box, scatter)`, from the individual factors.
pub fn log_posterior_factors<'a>(
    prior_mean: &'a Vector4<f64>,
    prior_cov: &Matrix4<f64>,
    anchors: &'a [Vector4<f64>],
    scatter: &Matrix4<f64>,
) -> impl Fn(&Vector4<f64>) -> f64 + 'a {
    let prior_inv = prior_cov.try_inverse().expect("invertible prior");
    let scatter_inv = scatter.try_inverse().expect("invertible scatter");
    let c = -0.5 * (4.0 * LN_2PI + prior_cov.determinant().ln())
        - 0.5 * anchors.len() as f64 * (4.0 * LN_2PI + scatter.determinant().ln());
    move |x| {
        let d = x - prior_mean;
        let spread: f64 = anchors
            .iter()
            .map(|a| {
                let r = a - x;
                r.dot(&(scatter_inv * r))
            })
            .sum();
        c - 0.5 * d.dot(&(prior_inv * d)) - 0.5 * spread
    }
}

/// Mean and variance along `x0 + t·u` of a log-density, by trapezoid
/// quadrature on `points` nodes over `±half_width`.
pub fn slice_moments(
    f: impl Fn(&Vector4<f64>) -> f64,
    x0: &Vector4<f64>,
    u: &Vector4<f64>,
    half_width: f64,
    points: usize,
) -> (f64, f64) {
    let f0 = f(x0);
    let h = 2.0 * half_width / (points - 1) as f64;
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..points {
        let t = -half_width + i as f64 * h;
        let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        let p = w * (f(&(x0 + u * t)) - f0).exp();
        z += p;
        s1 += p * t;
        s2 += p * t * t;
    }
    let mean = s1 / z;
    (mean, s2 / z - mean * mean)
}

/// Slice moments with the window grown or shrunk until it spans ±8σ.
pub fn slice_moments_8sigma(
    f: impl Fn(&Vector4<f64>) -> f64,
    x0: &Vector4<f64>,
    u: &Vector4<f64>,
    initial: f64,
    points: usize,
) -> (f64, f64) {
    let mut width = initial;
    for _ in 0..50 {
        let (_, v) = slice_moments(&f, x0, u, width, 2001);
        let next = 8.0 * v.sqrt();
        if (next - width).abs() <= 1e-6 * width {
            break;
        }
        width = next;
    }
    slice_moments(&f, x0, u, width, points)
}

/// Posterior mean and covariance recovered from 1-D quadrature slices through
/// `x0`: axis slices give the diagonal precision, pairwise diagonal slices the
/// off-diagonal precision, and the axis-slice means the offset of the true
/// mean from `x0`.
pub fn quadrature_moments(
    f: impl Fn(&Vector4<f64>) -> f64,
    x0: &Vector4<f64>,
    scale: f64,
    points: usize,
) -> (Vector4<f64>, Matrix4<f64>) {
    let axis = |d: usize| Vector4::from_fn(|i, _| if i == d { 1.0 } else { 0.0 });
    let mut q = Matrix4::zeros();
    let mut offsets = Vector4::zeros();
    for d in 0..4 {
        let (m, v) = slice_moments_8sigma(&f, x0, &axis(d), 8.0 * scale, points);
        q[(d, d)] = 1.0 / v;
        offsets[d] = m;
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            let (_, v) = slice_moments_8sigma(&f, x0, &(axis(i) + axis(j)), 8.0 * scale, points);
            q[(i, j)] = (1.0 / v - q[(i, i)] - q[(j, j)]) / 2.0;
            q[(j, i)] = q[(i, j)];
        }
    }
    let cov = q.try_inverse().expect("quadrature precision invertible");
    // conditional mean along axis d through x0 is (Qδ)_d / Q_dd
    let delta = cov * Vector4::from_fn(|d, _| q[(d, d)] * offsets[d]);
    (x0 + delta, (cov + cov.transpose()) * 0.5)
}
