//! Semi-supervised learning of the motion parameters with a variational SMC
//! objective.
//!
//! The objective for one labelled frame is the detection log-likelihood of
//! the labels plus the log-marginal estimates of the particle filter run
//! forward and backward from the labels over unlabelled neighbour frames.

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterState, Particle, TransitionRecord};
use crate::loss::{detection_log_likelihood, supervised_loss, LabeledFrame};
use crate::model::transition_log_prob_gradient;
use crate::parallel::Execution;
use crate::rng::{derive_seed, tag};
use crate::types::{FrameObservations, ModelParams, MotionParams};

/// Initial proposal covariance of the labelled objects.
const LABEL_COV: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSupervisedBatch {
    pub labeled: LabeledFrame,
    /// Unlabelled frames after the labelled one, in time order.
    pub forward: Vec<FrameObservations>,
    /// Unlabelled frames before the labelled one, in reverse time order.
    pub backward: Vec<FrameObservations>,
}

/// Per-direction result of a filter run from the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionReport {
    /// Log-marginal increment of each frame.
    pub log_mean_weights: Vec<f64>,
    pub ess: Vec<f64>,
    pub gradient: MotionParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    /// `supervised + Σ forward + Σ backward`.
    pub elbo: f64,
    /// Detection log-likelihood of the labelled frame.
    pub supervised: f64,
    pub forward: DirectionReport,
    pub backward: DirectionReport,
    /// Gradient of the objective with respect to the motion parameters.
    pub gradient: MotionParams,
}

/// Gradient of one particle's log-weight with respect to the motion
/// parameters with the proposed boxes held fixed and the proposal density's
/// dependence dropped: the sum of matched transition-density gradients.
pub fn particle_log_weight_gradient(
    prev: &Particle,
    next: &Particle,
    record: &TransitionRecord,
    motion: &MotionParams,
) -> MotionParams {
    let mut grad = MotionParams::zeros();
    for &(p, ci) in &record.association.matches {
        let n = record
            .object_cluster
            .iter()
            .position(|&c| c == ci)
            .expect("matched cluster is included");
        grad.add_scaled(
            &transition_log_prob_gradient(&next.objects[n].bbox, &prev.objects[p].bbox, motion),
            1.0,
        );
    }
    grad
}

fn run_direction(
    labeled: &LabeledFrame,
    frames: &[FrameObservations],
    params: &ModelParams,
    config: FilterConfig,
) -> Result<DirectionReport> {
    let mut state = FilterState::from_objects(&labeled.objects, LABEL_COV, config)?;
    let mut report = DirectionReport {
        log_mean_weights: Vec::with_capacity(frames.len()),
        ess: Vec::with_capacity(frames.len()),
        gradient: MotionParams::zeros(),
    };
    for frame in frames {
        let prev = state.particles.clone();
        let snap = state.step(frame, params)?;
        for ((next, record), &w) in snap.particles.iter().zip(&snap.records).zip(&snap.weights) {
            let g = particle_log_weight_gradient(&prev[next.ancestor], next, record, &params.motion);
            report.gradient.add_scaled(&g, w);
        }
        report.log_mean_weights.push(snap.log_increment);
        report.ess.push(snap.ess);
    }
    Ok(report)
}

/// Estimates the objective for one batch with `num_particles` particles.
pub fn elbo_estimate(
    batch: &SemiSupervisedBatch,
    params: &ModelParams,
    num_particles: usize,
    seed: u64,
    execution: Execution,
) -> Result<ElboReport> {
    if num_particles < 2 {
        return Err(Error::Config("elbo estimation needs at least 2 particles".into()));
    }
    let config = |direction: u64| FilterConfig {
        execution,
        ..FilterConfig::new(num_particles, derive_seed(seed, &[tag::TRAIN, direction]))
    };
    let supervised = detection_log_likelihood(&batch.labeled, params)?;
    let forward = run_direction(&batch.labeled, &batch.forward, params, config(0))?;
    let backward = run_direction(&batch.labeled, &batch.backward, params, config(1))?;
    let elbo = supervised
        + forward.log_mean_weights.iter().sum::<f64>()
        + backward.log_mean_weights.iter().sum::<f64>();
    let mut gradient = forward.gradient;
    gradient.add_scaled(&backward.gradient, 1.0);
    Ok(ElboReport {
        elbo,
        supervised,
        forward,
        backward,
        gradient,
    })
}

pub fn elbo_gradient(
    batch: &SemiSupervisedBatch,
    params: &ModelParams,
    num_particles: usize,
    seed: u64,
    execution: Execution,
) -> Result<MotionParams> {
    Ok(elbo_estimate(batch, params, num_particles, seed, execution)?.gradient)
}

/// One batch per labelled frame index, with up to `neighbours` unlabelled
/// frames on each side. `sources` gives the source track id of every anchor.
pub fn batches_from_sequence(
    frames: &[FrameObservations],
    truth: &[Vec<crate::types::ObjectState>],
    sources: &[Vec<Option<u64>>],
    labelled: &[usize],
    neighbours: usize,
) -> Result<Vec<SemiSupervisedBatch>> {
    if frames.len() != truth.len() || frames.len() != sources.len() {
        return Err(Error::Input("frames, truth and sources differ in length".into()));
    }
    labelled
        .iter()
        .map(|&t| {
            if t >= frames.len() {
                return Err(Error::Input(format!("labelled frame {t} out of range")));
            }
            let labeled = LabeledFrame::from_sources(frames[t].clone(), truth[t].clone(), &sources[t])?;
            let end = (t + 1 + neighbours).min(frames.len());
            Ok(SemiSupervisedBatch {
                labeled,
                forward: frames[t + 1..end].to_vec(),
                backward: frames[t.saturating_sub(neighbours)..t].iter().rev().cloned().collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Stage 1 stops when the relative objective improvement over
    /// `plateau_window` epochs falls below this.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub max_stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub num_particles: usize,
    /// Keep the transition matrix fixed.
    pub freeze_a: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            clip_norm: 10.0,
            plateau_tol: 1e-4,
            plateau_window: 5,
            max_stage1_epochs: 200,
            stage2_epochs: 30,
            num_particles: 64,
            freeze_a: true,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be at least 1".into()));
        }
        if self.num_particles < 2 {
            return Err(Error::Config("num_particles must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean objective per batch, evaluated before the update.
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after stage 1.
    pub stage1: MotionParams,
    /// Parameters after stage 2.
    pub params: MotionParams,
    pub curve: Vec<EpochRecord>,
}

fn ascent_step(params: &mut MotionParams, grad: &MotionParams, config: &TrainConfig) -> f64 {
    let mut g = *grad;
    if config.freeze_a {
        g.a = nalgebra::Matrix4::zeros();
    }
    let norm = g.norm();
    if norm > config.clip_norm {
        g = g.scaled(config.clip_norm / norm);
    }
    params.add_scaled(&g, config.learning_rate);
    norm
}

fn check(objective: f64, params: &MotionParams, epoch: usize) -> Result<()> {
    if !objective.is_finite() {
        return Err(Error::Divergence {
            epoch,
            message: format!("objective {objective}"),
        });
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            epoch,
            message: "non-finite motion parameters".into(),
        });
    }
    Ok(())
}

/// Mean supervised objective `-loss` and its gradient over the labelled frames.
fn supervised_objective(dataset: &[SemiSupervisedBatch], params: &ModelParams) -> Result<(f64, MotionParams)> {
    let mut total = 0.0;
    let mut grad = MotionParams::zeros();
    for batch in dataset {
        let (loss, g) = supervised_loss(std::slice::from_ref(&batch.labeled), params)?;
        total -= loss;
        grad.add_scaled(&g, -1.0);
    }
    let n = dataset.len() as f64;
    Ok((total / n, grad.scaled(1.0 / n)))
}

/// Two-stage gradient ascent: the supervised objective until it plateaus,
/// then the full objective for a fixed number of epochs.
pub fn train(dataset: &[SemiSupervisedBatch], params0: &ModelParams, config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    config.validate()?;
    let mut params = params0.clone();
    let mut curve = Vec::new();

    let mut history: Vec<f64> = Vec::new();
    for epoch in 0..config.max_stage1_epochs {
        let (objective, grad) = supervised_objective(dataset, &params)?;
        check(objective, &params.motion, epoch)?;
        history.push(objective);
        if history.len() > config.plateau_window {
            let old = history[history.len() - 1 - config.plateau_window];
            if (objective - old) / old.abs().max(f64::MIN_POSITIVE) < config.plateau_tol {
                break;
            }
        }
        let grad_norm = ascent_step(&mut params.motion, &grad, config);
        curve.push(EpochRecord {
            stage: 1,
            epoch,
            objective,
            grad_norm,
        });
    }
    let stage1 = params.motion;

    let unlabelled = dataset.iter().any(|b| !b.forward.is_empty() || !b.backward.is_empty());
    if unlabelled {
        let n = dataset.len() as f64;
        for epoch in 0..config.stage2_epochs {
            let reports: Vec<Result<ElboReport>> = config.execution.map(dataset, |b, batch| {
                let seed = derive_seed(config.seed, &[tag::TRAIN, epoch as u64, b as u64]);
                elbo_estimate(batch, &params, config.num_particles, seed, config.execution)
            });
            let mut objective = 0.0;
            let mut grad = MotionParams::zeros();
            for (r, batch) in reports.into_iter().zip(dataset) {
                let r = r?;
                objective += r.elbo;
                grad.add_scaled(&r.gradient, 1.0);
                grad.add_scaled(&supervised_loss(std::slice::from_ref(&batch.labeled), &params)?.1, -1.0);
            }
            objective /= n;
            let grad = grad.scaled(1.0 / n);
            check(objective, &params.motion, epoch)?;
            let grad_norm = ascent_step(&mut params.motion, &grad, config);
            check(objective, &params.motion, epoch)?;
            curve.push(EpochRecord {
                stage: 2,
                epoch,
                objective,
                grad_norm,
            });
        }
    }

    Ok(TrainOutcome {
        stage1,
        params: params.motion,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnchorObservation, BBox, ObjectState};

    fn frame(t: usize, bbox: BBox) -> FrameObservations {
        FrameObservations {
            frame_index: t,
            anchors: vec![AnchorObservation::new(bbox, 0.9, vec![0.1, 0.8, 0.1]).unwrap()],
        }
    }

    fn params() -> ModelParams {
        ModelParams {
            num_classes: 3,
            lambda_death: 0.05,
            lambda_birth: 0.1,
            eps_pd: 4.0,
            motion: MotionParams::identity(2.0),
            ..ModelParams::default()
        }
    }

    fn batch(t: usize) -> SemiSupervisedBatch {
        let start = BBox([100.0, 100.0, 150.0, 160.0]);
        let labeled = LabeledFrame::from_sources(frame(0, start), vec![ObjectState::new(start, 1, 0)], &[Some(0)]).unwrap();
        SemiSupervisedBatch {
            labeled,
            forward: (1..=t).map(|i| frame(i, start.translate(2.0 * i as f64, i as f64))).collect(),
            backward: (1..=t).map(|i| frame(i, start.translate(-2.0 * i as f64, -(i as f64)))).collect(),
        }
    }

    #[test]
    fn no_neighbours_gives_supervised_term() {
        let b = batch(0);
        let r = elbo_estimate(&b, &params(), 8, 1, Execution::Sequential).unwrap();
        assert_eq!(r.elbo, r.supervised);
        assert_eq!(r.supervised, detection_log_likelihood(&b.labeled, &params()).unwrap());
        assert_eq!(r.gradient, MotionParams::zeros());
    }

    #[test]
    fn decomposition_and_reproducibility() {
        let b = batch(3);
        let p = params();
        let r = elbo_estimate(&b, &p, 16, 4, Execution::Sequential).unwrap();
        let sum = r.supervised + r.forward.log_mean_weights.iter().sum::<f64>() + r.backward.log_mean_weights.iter().sum::<f64>();
        assert_eq!(r.elbo, sum);
        assert_eq!(r.forward.log_mean_weights.len(), 3);
        assert!(r.gradient.is_finite());
        assert_eq!(r, elbo_estimate(&b, &p, 16, 4, Execution::Parallel).unwrap());
    }

    #[test]
    fn one_particle_rejected() {
        assert!(matches!(elbo_estimate(&batch(1), &params(), 1, 0, Execution::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn labelled_only_dataset_skips_stage_two() {
        let out = train(&[batch(0)], &params(), &TrainConfig::default()).unwrap();
        assert!(out.curve.iter().all(|e| e.stage == 1));
        assert_eq!(out.stage1, out.params);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            stage2_epochs: 2,
            num_particles: 8,
            ..TrainConfig::default()
        };
        let out = train(&[batch(2)], &params(), &cfg).unwrap();
        assert_eq!(out.params, params().motion);
        assert!(out.curve.iter().any(|e| e.stage == 2));
    }

    #[test]
    fn drift_is_learned() {
        let cfg = TrainConfig {
            stage2_epochs: 40,
            num_particles: 32,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let p = params();
        let mut b = batch(4);
        b.backward.clear();
        let out = train(&[b], &p, &cfg).unwrap();
        assert!(out.params.b[0] > 0.5 && out.params.b[2] > 0.5, "{:?}", out.params.b);
        assert_eq!(out.params.a, p.motion.a);
    }

    #[test]
    fn batches_take_neighbours_on_both_sides() {
        let start = BBox([100.0, 100.0, 150.0, 160.0]);
        let frames: Vec<FrameObservations> = (0..10).map(|t| frame(t, start)).collect();
        let truth: Vec<Vec<ObjectState>> = (0..10).map(|_| vec![ObjectState::new(start, 1, 0)]).collect();
        let sources = vec![vec![Some(0)]; 10];
        let b = batches_from_sequence(&frames, &truth, &sources, &[1, 8], 3).unwrap();
        assert_eq!(b[0].backward.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![0]);
        assert_eq!(b[0].forward.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(b[1].backward.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![7, 6, 5]);
        assert_eq!(b[1].forward.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![9]);
        assert!(batches_from_sequence(&frames, &truth, &sources, &[10], 3).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(train(&[], &params(), &TrainConfig::default()), Err(Error::Input(_))));
    }
}
