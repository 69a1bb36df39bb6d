//! Track output from weighted particle snapshots.

use nalgebra::{Matrix4, Vector4};

use super::FrameSnapshot;
use crate::types::BBox;

/// One reported object at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackEstimate {
    pub track_id: u64,
    pub bbox: BBox,
    pub cov: Matrix4<f64>,
    pub class_id: usize,
    /// Weighted class distribution over particles holding this track.
    pub class_probs: Vec<f64>,
    /// Weighted fraction of particles holding this track.
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackOutput {
    pub frames: Vec<(usize, Vec<TrackEstimate>)>,
}

/// Objects of the highest-weight particle (first on ties). Each is reported
/// with the weighted mixture of the Gaussian moments held for the same track
/// by every particle, its existence confidence and its
/// class distribution.
pub fn extract_frame(snapshot: &FrameSnapshot, num_classes: usize) -> Vec<TrackEstimate> {
    let Some(best) = snapshot
        .weights
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &w)| match acc {
            Some((_, bw)) if bw >= w => acc,
            _ => Some((i, w)),
        })
        .map(|(i, _)| i)
    else {
        return Vec::new();
    };
    snapshot.particles[best]
        .objects
        .iter()
        .map(|obj| {
            let mut class_probs = vec![0.0; num_classes];
            let mut confidence = 0.0;
            let mut holders = Vec::new();
            for (p, &w) in snapshot.particles.iter().zip(&snapshot.weights) {
                if let Some(i) = p.objects.iter().position(|o| o.track_id == obj.track_id) {
                    confidence += w;
                    class_probs[p.objects[i].class_id] += w;
                    holders.push((w, p.means[i], p.covariances[i]));
                }
            }
            let (mean, cov) = if confidence > 0.0 {
                class_probs.iter_mut().for_each(|c| *c /= confidence);
                let mean: Vector4<f64> = holders.iter().map(|(w, m, _)| m * *w).sum::<Vector4<f64>>() / confidence;
                let cov: Matrix4<f64> = holders
                    .iter()
                    .map(|(w, m, c)| (c + (m - mean) * (m - mean).transpose()) * *w)
                    .sum::<Matrix4<f64>>()
                    / confidence;
                (mean, cov)
            } else {
                let i = snapshot.particles[best].objects.iter().position(|o| o.track_id == obj.track_id).unwrap_or(0);
                (snapshot.particles[best].means[i], snapshot.particles[best].covariances[i])
            };
            TrackEstimate {
                track_id: obj.track_id,
                bbox: BBox::from_vector(&mean),
                cov: 0.5 * (cov + cov.transpose()),
                class_id: obj.class_id,
                class_probs,
                confidence: confidence.clamp(0.0, 1.0),
            }
        })
        .collect()
}

pub fn extract_tracks(snapshots: &[FrameSnapshot], num_classes: usize) -> TrackOutput {
    TrackOutput {
        frames: snapshots
            .iter()
            .map(|s| (s.frame_index, extract_frame(s, num_classes)))
            .collect(),
    }
}
