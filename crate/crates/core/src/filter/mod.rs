//! Particle filter over multi-object states.
//!
//! Each step clusters the frame's anchors, then per particle: draws inclusion
//! and class for every cluster, associates previous objects with the included
//! clusters, samples boxes from the conjugate proposals and computes the
//! closed-form importance weight. Weights are normalized, the log-marginal
//! estimate is updated and particles are resampled when the ESS drops.

pub mod association;
pub mod proposal;
pub mod resample;
pub mod tracks;
pub mod weight;

use nalgebra::{Matrix4, Vector4};

use crate::clustering::build_clusters;
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalize_log_weights};
use crate::parallel::Execution;
use crate::rng::{stream, tag};
use crate::types::{AnchorObservation, AssociationResult, Cluster, FrameObservations, ModelParams, ObjectState};

pub use association::associate;
pub use proposal::{initial_sample, proposal_update_matched, proposal_update_unmatched};
pub use resample::{effective_sample_size, systematic_resample};
pub use tracks::{extract_frame, extract_tracks, TrackEstimate, TrackOutput};
pub use weight::importance_weight;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub num_particles: usize,
    pub seed: u64,
    /// Resample when ESS falls below this fraction of the particle count.
    pub ess_fraction: f64,
    pub execution: Execution,
}

impl FilterConfig {
    pub fn new(num_particles: usize, seed: u64) -> Self {
        Self {
            num_particles,
            seed,
            ess_fraction: 0.5,
            execution: Execution::default(),
        }
    }
}

/// One weighted multi-object hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub objects: Vec<ObjectState>,
    /// Gaussian moments of each object's box given this particle's
    /// association history, tracked alongside the sampled boxes for reporting.
    pub means: Vec<Vector4<f64>>,
    pub covariances: Vec<Matrix4<f64>>,
    /// Normalized log-weight.
    pub log_weight: f64,
    /// Index of the parent in the preceding particle set.
    pub ancestor: usize,
}

/// Choices a particle made in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub included: Vec<bool>,
    /// Cluster index of each new object.
    pub object_cluster: Vec<usize>,
    /// `(previous object, cluster index)` pairs.
    pub association: AssociationResult,
    /// Unnormalized log importance weight of the step.
    pub log_weight: f64,
}

/// Weighted particle set right after one step, before resampling.
#[derive(Debug, Clone)]
pub struct FrameSnapshot {
    pub frame_index: usize,
    pub clusters: Vec<Cluster>,
    pub particles: Vec<Particle>,
    pub weights: Vec<f64>,
    pub records: Vec<TransitionRecord>,
    /// `ln Σ_l W_{t-1}^l w_t^l`.
    pub log_increment: f64,
    pub ess: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub particles: Vec<Particle>,
    /// Steps taken so far.
    pub steps: usize,
    pub log_marginal: f64,
    /// Base for ids of objects born in the next step.
    pub next_track_id: u64,
    pub config: FilterConfig,
}

impl FilterState {
    /// Particles with no objects.
    pub fn new(config: FilterConfig) -> Result<Self> {
        Self::from_objects(&[], 1e-6, config)
    }

    /// Every particle starts at the given objects, with covariance `cov_scale·I`.
    pub fn from_objects(objects: &[ObjectState], cov_scale: f64, config: FilterConfig) -> Result<Self> {
        if config.num_particles == 0 {
            return Err(Error::Config("num_particles must be at least 1".into()));
        }
        let n = config.num_particles;
        let particle = Particle {
            objects: objects.to_vec(),
            means: objects.iter().map(|o| o.bbox.to_vector()).collect(),
            covariances: vec![Matrix4::identity() * cov_scale; objects.len()],
            log_weight: -(n as f64).ln(),
            ancestor: 0,
        };
        let particles = (0..n)
            .map(|l| Particle {
                ancestor: l,
                ..particle.clone()
            })
            .collect();
        Ok(Self {
            particles,
            steps: 0,
            log_marginal: 0.0,
            next_track_id: objects.iter().map(|o| o.track_id + 1).max().unwrap_or(0),
            config,
        })
    }

    pub fn num_particles(&self) -> usize {
        self.particles.len()
    }

    /// Normalized weights of the current particle set.
    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    /// Processes one frame.
    pub fn step(&mut self, frame: &FrameObservations, params: &ModelParams) -> Result<FrameSnapshot> {
        let clusters = build_clusters(frame, params);
        let mut constant = 0.0;
        for c in &clusters {
            let members: Vec<&AnchorObservation> = c.anchor_indices.iter().map(|&i| &frame.anchors[i]).collect();
            constant += weight::cluster_log_constant(&members, c, params)?;
        }

        let seed = self.config.seed;
        let step = self.steps as u64;
        let base = self.next_track_id;
        let outcomes: Vec<Result<(Particle, TransitionRecord)>> =
            self.config.execution.map(&self.particles, |l, particle| {
                let mut rng = stream(seed, &[tag::PROPAGATE, step, l as u64]);
                propagate(particle, &clusters, base, params, &mut rng)
            });
        let mut particles = Vec::with_capacity(outcomes.len());
        let mut records = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            let (p, r) = o?;
            particles.push(p);
            records.push(r);
        }

        let log_w: Vec<f64> = records.iter().map(|r| r.log_weight + constant).collect();
        let joint: Vec<f64> = particles
            .iter()
            .zip(&log_w)
            .map(|(p, w)| p.log_weight + w)
            .collect();
        let log_increment = log_sum_exp(&joint);
        if !log_increment.is_finite() {
            return Err(Error::Degenerate {
                frame: frame.frame_index,
            });
        }
        let (weights, _) = normalize_log_weights(&joint);
        for (l, (p, w)) in particles.iter_mut().zip(&weights).enumerate() {
            p.log_weight = w.ln();
            p.ancestor = l;
        }
        let ess = effective_sample_size(&weights);

        let n = particles.len();
        let resampled = ess < self.config.ess_fraction * n as f64;
        let snapshot_particles = particles.clone();
        if resampled {
            let mut rng = stream(seed, &[tag::RESAMPLE, step]);
            let ancestors = systematic_resample(&weights, &mut rng)?;
            particles = ancestors
                .iter()
                .map(|&a| Particle {
                    ancestor: a,
                    log_weight: -(n as f64).ln(),
                    ..particles[a].clone()
                })
                .collect();
        }

        self.particles = particles;
        self.steps += 1;
        self.log_marginal += log_increment;
        self.next_track_id = base + clusters.len() as u64;
        Ok(FrameSnapshot {
            frame_index: frame.frame_index,
            clusters,
            particles: snapshot_particles,
            weights,
            records,
            log_increment,
            ess,
            resampled,
        })
    }
}

/// Proposes one particle's next state and its importance weight (without the
/// per-frame constant).
pub fn propagate<R: rand::Rng + ?Sized>(
    particle: &Particle,
    clusters: &[Cluster],
    next_track_id: u64,
    params: &ModelParams,
    rng: &mut R,
) -> Result<(Particle, TransitionRecord)> {
    let draws = initial_sample(clusters, rng);
    let candidates: Vec<usize> = (0..clusters.len()).filter(|&i| draws[i].included).collect();
    let assoc = associate(&particle.objects, clusters, &candidates, &params.motion, params.iou_min);

    let mut objects = Vec::with_capacity(candidates.len());
    let mut means = Vec::with_capacity(candidates.len());
    let mut covariances = Vec::with_capacity(candidates.len());
    let mut matched_factors = 0.0;
    for &ci in &candidates {
        let cluster = &clusters[ci];
        let (sample, moments, class_id, track_id) = match assoc.match_for_cluster(ci) {
            Some(p) => {
                let prev = &particle.objects[p];
                matched_factors += weight::matched_log_factor(&prev.bbox, prev.class_id, cluster, params)?;
                let s = proposal_update_matched(prev, cluster, &params.motion, rng)?;
                let m = &params.motion;
                let prior_mean = m.a * particle.means[p] + m.b;
                let prior_cov = m.a * particle.covariances[p] * m.a.transpose() + Matrix4::from_diagonal(&m.variance());
                (s, proposal::fuse(&prior_mean, &prior_cov, cluster)?, prev.class_id, prev.track_id)
            }
            None => {
                let s = proposal_update_unmatched(cluster, params, rng)?;
                let moments = proposal::Posterior { mean: s.mean, cov: s.cov };
                (s, moments, draws[ci].class_id, next_track_id + ci as u64)
            }
        };
        objects.push(ObjectState::new(sample.bbox, class_id, track_id));
        means.push(moments.mean);
        covariances.push(moments.cov);
    }

    let log_weight = importance_weight(
        particle.objects.len(),
        assoc.matches.len(),
        candidates.len(),
        matched_factors,
        params,
    );
    let record = TransitionRecord {
        included: draws.iter().map(|d| d.included).collect(),
        object_cluster: candidates,
        association: assoc,
        log_weight,
    };
    Ok((
        Particle {
            objects,
            means,
            covariances,
            log_weight: particle.log_weight,
            ancestor: particle.ancestor,
        },
        record,
    ))
}

/// Runs the filter over a sequence and returns every snapshot.
pub fn run(state: &mut FilterState, frames: &[FrameObservations], params: &ModelParams) -> Result<Vec<FrameSnapshot>> {
    frames.iter().map(|f| state.step(f, params)).collect()
}
