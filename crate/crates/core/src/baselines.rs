//! Ablation baselines sharing the clustering, fusion and metric code paths
//! of the particle filter.

use nalgebra::{Matrix4, Vector4};

use crate::assignment::solve_max;
use crate::clustering::{build_clusters, iou};
use crate::error::{Error, Result};
use crate::filter::proposal::unmatched_posterior;
use crate::filter::{TrackEstimate, TrackOutput};
use crate::math::{log_sum_exp, spd_inverse};
use crate::types::{BBox, Cluster, FrameObservations, ModelParams, MotionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    SingleDetector,
    FrameBayesian,
    GreedyLink,
    GreedyOffsetLink,
    KalmanLink,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::SingleDetector,
        BaselineKind::FrameBayesian,
        BaselineKind::GreedyLink,
        BaselineKind::GreedyOffsetLink,
        BaselineKind::KalmanLink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SingleDetector => "single",
            BaselineKind::FrameBayesian => "frame-bayes",
            BaselineKind::GreedyLink => "greedy",
            BaselineKind::GreedyOffsetLink => "greedy-offset",
            BaselineKind::KalmanLink => "kalman",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// IoU above which non-maximum suppression drops the lower-scored anchor.
    pub nms_iou: f64,
    /// Smallest IoU accepted when linking detections across frames.
    pub link_iou: f64,
    /// Clusters below this inclusion probability are not reported.
    pub inclusion_threshold: f64,
    /// Isotropic corner variance given to detections without a covariance.
    pub detector_var: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            link_iou: 0.3,
            inclusion_threshold: 0.5,
            detector_var: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.nms_iou) && unit(self.link_iou) && unit(self.inclusion_threshold)) {
            return Err(Error::Config("baseline IoU thresholds and inclusion threshold must lie in [0, 1]".into()));
        }
        if !(self.detector_var > 0.0 && self.detector_var.is_finite()) {
            return Err(Error::Config("detector_var must be positive".into()));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression: indices of kept anchors, highest score
/// first (lower index first on ties).
pub fn single_detector(frame: &FrameObservations, nms_iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frame.anchors.len()).collect();
    order.sort_by(|&a, &b| frame.anchors[b].score().total_cmp(&frame.anchors[a].score()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &frame.anchors[i].bbox;
        if kept.iter().all(|&k| iou(&frame.anchors[k].bbox, b) <= nms_iou) {
            kept.push(i);
        }
    }
    kept
}

/// NMS survivors as estimates with an isotropic covariance. Track ids are
/// positions within the frame.
pub fn single_detector_estimates(frame: &FrameObservations, config: &BaselineConfig) -> Vec<TrackEstimate> {
    single_detector(frame, config.nms_iou)
        .into_iter()
        .enumerate()
        .map(|(n, i)| {
            let a = &frame.anchors[i];
            let (class_id, _) = a.best_class();
            TrackEstimate {
                track_id: n as u64,
                bbox: a.bbox,
                cov: Matrix4::identity() * config.detector_var,
                class_id,
                class_probs: a.class_scores.clone(),
                confidence: a.score(),
            }
        })
        .collect()
}

fn cluster_estimate(cluster: &Cluster, mean: &Vector4<f64>, cov: &Matrix4<f64>, class_probs: Vec<f64>, track_id: u64) -> TrackEstimate {
    TrackEstimate {
        track_id,
        bbox: BBox::from_vector(mean),
        cov: *cov,
        class_id: crate::types::argmax(&class_probs).0,
        class_probs,
        confidence: cluster.inclusion_prob,
    }
}

/// Every cluster whose inclusion probability reaches the threshold, fused
/// with the new-object prior only.
pub fn frame_bayesian(frame: &FrameObservations, params: &ModelParams, config: &BaselineConfig) -> Result<Vec<TrackEstimate>> {
    build_clusters(frame, params)
        .iter()
        .filter(|c| c.inclusion_prob >= config.inclusion_threshold)
        .enumerate()
        .map(|(n, c)| {
            let post = unmatched_posterior(c, params)?;
            Ok(cluster_estimate(c, &post.mean, &post.cov, c.fused_class.clone(), n as u64))
        })
        .collect()
}

/// Hungarian matching of `prev` boxes to `next` boxes on IoU; pairs below
/// `min_iou` are dropped. Returns the matched `prev` index per `next` box.
fn link(prev: &[BBox], next: &[BBox], min_iou: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; next.len()];
    if prev.is_empty() || next.is_empty() {
        return out;
    }
    let overlap: Vec<Vec<f64>> = prev.iter().map(|p| next.iter().map(|n| iou(p, n)).collect()).collect();
    for (p, j) in solve_max(&overlap).into_iter().enumerate() {
        if let Some(j) = j {
            if overlap[p][j] >= min_iou && overlap[p][j] > 0.0 {
                out[j] = Some(p);
            }
        }
    }
    out
}

/// Assigns track ids to per-frame detections by IoU matching against the
/// previous frame's detections, or against their motion-predicted boxes when
/// `motion` is given. Unmatched detections start new tracks.
pub fn greedy_link(detections: &[Vec<TrackEstimate>], link_iou: f64, motion: Option<&MotionParams>) -> Vec<Vec<TrackEstimate>> {
    let mut next_id = 0u64;
    let mut out: Vec<Vec<TrackEstimate>> = Vec::with_capacity(detections.len());
    for frame in detections {
        let prev: Vec<BBox> = out
            .last()
            .map(|f| {
                f.iter()
                    .map(|t| match motion {
                        Some(m) => BBox::from_vector(&(m.a * t.bbox.to_vector() + m.b)),
                        None => t.bbox,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let boxes: Vec<BBox> = frame.iter().map(|t| t.bbox).collect();
        let matches = link(&prev, &boxes, link_iou);
        let linked = frame
            .iter()
            .zip(matches)
            .map(|(t, m)| {
                let track_id = match m {
                    Some(p) => out.last().expect("matched a previous frame")[p].track_id,
                    None => {
                        next_id += 1;
                        next_id - 1
                    }
                };
                TrackEstimate { track_id, ..t.clone() }
            })
            .collect();
        out.push(linked);
    }
    out
}

/// Kalman prediction under the motion model.
pub fn kalman_predict(mean: &Vector4<f64>, cov: &Matrix4<f64>, motion: &MotionParams) -> (Vector4<f64>, Matrix4<f64>) {
    (
        motion.a * mean + motion.b,
        motion.a * cov * motion.a.transpose() + Matrix4::from_diagonal(&motion.variance()),
    )
}

/// Kalman update with the cluster mean as measurement and `Σ(B)/M` as its
/// noise.
pub fn kalman_update(mean: &Vector4<f64>, cov: &Matrix4<f64>, cluster: &Cluster) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    let r = cluster.scatter / cluster.count as f64;
    let gain = cov * spd_inverse(&(cov + r))?;
    let innovation = cluster.mean.to_vector() - mean;
    let i_k = Matrix4::identity() - gain;
    // Joseph form
    let p = i_k * cov * i_k.transpose() + gain * r * gain.transpose();
    Ok((mean + gain * innovation, 0.5 * (p + p.transpose())))
}

struct KalmanTrack {
    id: u64,
    mean: Vector4<f64>,
    cov: Matrix4<f64>,
    log_class: Vec<f64>,
}

fn normalized(log_p: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(log_p);
    log_p.iter().map(|v| (v - z).exp()).collect()
}

/// Per-track Kalman filtering of clusters matched by IoU against predicted
/// boxes. Class evidence accumulates over a track; unmatched tracks end and
/// unmatched clusters start tracks from the new-object posterior.
pub fn kalman_link(frames: &[FrameObservations], params: &ModelParams, config: &BaselineConfig) -> Result<TrackOutput> {
    let mut tracks: Vec<KalmanTrack> = Vec::new();
    let mut next_id = 0u64;
    let mut out = TrackOutput::default();
    for frame in frames {
        let clusters: Vec<Cluster> = build_clusters(frame, params)
            .into_iter()
            .filter(|c| c.inclusion_prob >= config.inclusion_threshold)
            .collect();
        let predicted: Vec<(Vector4<f64>, Matrix4<f64>)> =
            tracks.iter().map(|t| kalman_predict(&t.mean, &t.cov, &params.motion)).collect();
        let prev_boxes: Vec<BBox> = predicted.iter().map(|(m, _)| BBox::from_vector(m)).collect();
        let boxes: Vec<BBox> = clusters.iter().map(|c| c.mean).collect();
        let matches = link(&prev_boxes, &boxes, config.link_iou);

        let mut next_tracks = Vec::with_capacity(clusters.len());
        let mut estimates = Vec::with_capacity(clusters.len());
        for (c, m) in clusters.iter().zip(matches) {
            let track = match m {
                Some(p) => {
                    let (mean, cov) = kalman_update(&predicted[p].0, &predicted[p].1, c)?;
                    let log_class = tracks[p].log_class.iter().zip(&c.log_fused_class).map(|(a, b)| a + b).collect();
                    KalmanTrack {
                        id: tracks[p].id,
                        mean,
                        cov,
                        log_class,
                    }
                }
                None => {
                    let post = unmatched_posterior(c, params)?;
                    next_id += 1;
                    KalmanTrack {
                        id: next_id - 1,
                        mean: post.mean,
                        cov: post.cov,
                        log_class: c.log_fused_class.clone(),
                    }
                }
            };
            estimates.push(cluster_estimate(c, &track.mean, &track.cov, normalized(&track.log_class), track.id));
            next_tracks.push(track);
        }
        tracks = next_tracks;
        out.frames.push((frame.frame_index, estimates));
    }
    Ok(out)
}

/// Runs one baseline over a sequence.
pub fn run_baseline(kind: BaselineKind, frames: &[FrameObservations], params: &ModelParams, config: &BaselineConfig) -> Result<TrackOutput> {
    config.validate()?;
    let wrap = |dets: Vec<Vec<TrackEstimate>>| TrackOutput {
        frames: frames.iter().map(|f| f.frame_index).zip(dets).collect(),
    };
    let single = || frames.iter().map(|f| single_detector_estimates(f, config)).collect::<Vec<_>>();
    Ok(match kind {
        BaselineKind::SingleDetector => wrap(single()),
        BaselineKind::FrameBayesian => wrap(frames.iter().map(|f| frame_bayesian(f, params, config)).collect::<Result<_>>()?),
        BaselineKind::GreedyLink => wrap(greedy_link(&single(), config.link_iou, None)),
        BaselineKind::GreedyOffsetLink => wrap(greedy_link(&single(), config.link_iou, Some(&params.motion))),
        BaselineKind::KalmanLink => kalman_link(frames, params, config)?,
    })
}
