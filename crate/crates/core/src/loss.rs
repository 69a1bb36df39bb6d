//! Supervised loss: negative joint log-likelihood of fully labelled frames.

use std::collections::HashMap;

use crate::clustering::build_clusters;
use crate::error::{Error, Result};
use crate::model::{joint_emission_log_prob, joint_transition_log_prob, transition_log_prob_gradient, AnchorAssignment};
use crate::types::{AssociationResult, FrameObservations, ModelParams, MotionParams, ObjectState};

/// A frame with ground-truth objects and, per anchor, its source.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub observations: FrameObservations,
    pub objects: Vec<ObjectState>,
    pub assignment: Option<Vec<AnchorAssignment>>,
}

impl LabeledFrame {
    /// Builds the anchor assignment from per-anchor source track ids.
    pub fn from_sources(observations: FrameObservations, objects: Vec<ObjectState>, sources: &[Option<u64>]) -> Result<Self> {
        let index: HashMap<u64, usize> = objects.iter().enumerate().map(|(i, o)| (o.track_id, i)).collect();
        let assignment = sources
            .iter()
            .map(|s| match s {
                None => Ok(AnchorAssignment::Clutter),
                Some(id) => index
                    .get(id)
                    .map(|&i| AnchorAssignment::Object(i))
                    .ok_or_else(|| Error::Input(format!("anchor source {id} is not a labelled object"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            observations,
            objects,
            assignment: Some(assignment),
        })
    }
}

/// Association of two consecutive labelled frames by track id, as
/// `(prev index, next index)` pairs.
pub fn association_by_track(prev: &[ObjectState], next: &[ObjectState]) -> AssociationResult {
    let index: HashMap<u64, usize> = next.iter().enumerate().map(|(i, o)| (o.track_id, i)).collect();
    let mut result = AssociationResult::default();
    let mut taken = vec![false; next.len()];
    for (p, o) in prev.iter().enumerate() {
        match index.get(&o.track_id) {
            Some(&n) => {
                taken[n] = true;
                result.matches.push((p, n));
            }
            None => result.unmatched_prev.push(p),
        }
    }
    result.unmatched_new = (0..next.len()).filter(|&n| !taken[n]).collect();
    result
}

/// Detection log-likelihood of one labelled frame.
pub fn detection_log_likelihood(frame: &LabeledFrame, params: &ModelParams) -> Result<f64> {
    let assignment = frame.assignment.as_ref().ok_or_else(|| {
        Error::Input(format!("frame {} has no anchor assignment", frame.observations.frame_index))
    })?;
    let clusters = build_clusters(&frame.observations, params);
    joint_emission_log_prob(&frame.observations, &clusters, &frame.objects, assignment, params)
}

/// Negative log-likelihood of labelled frames and its gradient with respect
/// to the motion parameters. Frames whose indices are consecutive also
/// contribute their transition, with associations taken from track ids.
pub fn supervised_loss(frames: &[LabeledFrame], params: &ModelParams) -> Result<(f64, MotionParams)> {
    let mut total = 0.0;
    let mut grad = MotionParams::zeros();
    for frame in frames {
        total += detection_log_likelihood(frame, params)?;
    }
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.observations.frame_index != a.observations.frame_index + 1 {
            continue;
        }
        let assoc = association_by_track(&a.objects, &b.objects);
        total += joint_transition_log_prob(&a.objects, &b.objects, &assoc, params)?;
        for &(p, n) in &assoc.matches {
            grad.add_scaled(
                &transition_log_prob_gradient(&b.objects[n].bbox, &a.objects[p].bbox, &params.motion),
                1.0,
            );
        }
    }
    Ok((-total, grad.scaled(-1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnchorObservation, BBox};
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    fn labelled(t: usize, bbox: BBox) -> LabeledFrame {
        let anchor = AnchorObservation::new(bbox, 0.9, vec![0.8, 0.2]).unwrap();
        LabeledFrame::from_sources(
            FrameObservations {
                frame_index: t,
                anchors: vec![anchor],
            },
            vec![ObjectState::new(bbox, 0, 7)],
            &[Some(7)],
        )
        .unwrap()
    }

    fn params(motion: MotionParams) -> ModelParams {
        ModelParams {
            num_classes: 2,
            motion,
            ..ModelParams::default()
        }
    }

    fn toy() -> Vec<LabeledFrame> {
        (0..6)
            .map(|t| labelled(t, BBox([10.0, 10.0, 30.0, 30.0]).translate(1.5 * t as f64, -0.5 * t as f64)))
            .collect()
    }

    #[test]
    fn missing_assignment_is_an_error() {
        let mut f = labelled(0, BBox([0.0, 0.0, 5.0, 5.0]));
        f.assignment = None;
        assert!(matches!(supervised_loss(&[f], &params(MotionParams::identity(1.0))), Err(Error::Input(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let frames = toy();
        let base = MotionParams {
            a: nalgebra::Matrix4::identity() * 1.01,
            b: Vector4::new(0.3, -0.1, 0.2, 0.0),
            s: Vector4::new(0.1, -0.2, 0.3, 0.0),
        };
        let (_, grad) = supervised_loss(&frames, &params(base)).unwrap();
        let g = grad.to_vec();
        let x = base.to_vec();
        let h = 1e-5;
        for i in 0..MotionParams::NUM_COORDS {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let lu = supervised_loss(&frames, &params(MotionParams::from_slice(&up).unwrap())).unwrap().0;
            let ld = supervised_loss(&frames, &params(MotionParams::from_slice(&down).unwrap())).unwrap().0;
            let fd = (lu - ld) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn descent_decreases_loss() {
        let frames = toy();
        let mut m = MotionParams::identity(1.0);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grad) = supervised_loss(&frames, &params(m)).unwrap();
            assert!(loss <= last + 1e-12);
            last = loss;
            let mut step = grad;
            step.a = nalgebra::Matrix4::zeros();
            m.add_scaled(&step, -0.01);
        }
    }

    #[test]
    fn perfect_prediction_leaves_only_constants() {
        let bbox = BBox([10.0, 10.0, 30.0, 30.0]);
        let frames = vec![labelled(0, bbox), labelled(1, bbox)];
        let p = params(MotionParams::identity(1.0));
        let (loss, grad) = supervised_loss(&frames, &p).unwrap();
        let emission: f64 = frames.iter().map(|f| detection_log_likelihood(f, &p).unwrap()).sum();
        let transition = joint_transition_log_prob(
            &frames[0].objects,
            &frames[1].objects,
            &association_by_track(&frames[0].objects, &frames[1].objects),
            &p,
        )
        .unwrap();
        assert_relative_eq!(loss, -(emission + transition), epsilon = 1e-12);
        assert_eq!(grad.b, Vector4::zeros());
        assert_eq!(grad.s, Vector4::repeat(1.0));
    }
}
