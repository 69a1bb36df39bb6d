//! Hungarian association of previous objects with this frame's clusters.

use crate::assignment::solve_max;
use crate::clustering::iou;
use crate::model::motion_predict;
use crate::types::{AssociationResult, BBox, Cluster, MotionParams, ObjectState};

/// Stand-in for `ln 0` in the affinity matrix, which the solver needs finite.
pub const AFFINITY_FLOOR: f64 = -1e6;

/// Matches previous objects to the candidate clusters (given by index) with
/// maximum total affinity `ln IoU(A·L+b, μ(B)) + ln c_j[C]`. Pairs whose IoU
/// falls below `iou_min`, or whose affinity is `-∞`, are rejected afterwards.
///
/// Result indices are `(prev object, cluster index)`.
pub fn associate(
    prev: &[ObjectState],
    clusters: &[Cluster],
    candidates: &[usize],
    motion: &MotionParams,
    iou_min: f64,
) -> AssociationResult {
    let predicted: Vec<BBox> = prev
        .iter()
        .map(|o| BBox::from_vector(&motion_predict(&o.bbox, motion).0))
        .collect();
    let mut overlap = vec![vec![0.0; candidates.len()]; prev.len()];
    let mut affinity = vec![vec![AFFINITY_FLOOR; candidates.len()]; prev.len()];
    for (p, obj) in prev.iter().enumerate() {
        for (j, &ci) in candidates.iter().enumerate() {
            let c = &clusters[ci];
            let o = iou(&predicted[p], &c.mean);
            let a = o.ln() + c.log_fused_class[obj.class_id];
            overlap[p][j] = o;
            if a.is_finite() {
                affinity[p][j] = a;
            }
        }
    }

    let mut result = AssociationResult::default();
    let mut taken = vec![false; candidates.len()];
    if !prev.is_empty() && !candidates.is_empty() {
        for (p, j) in solve_max(&affinity).into_iter().enumerate() {
            match j {
                Some(j) if overlap[p][j] >= iou_min && affinity[p][j] > AFFINITY_FLOOR => {
                    taken[j] = true;
                    result.matches.push((p, candidates[j]));
                }
                _ => result.unmatched_prev.push(p),
            }
        }
    } else {
        result.unmatched_prev = (0..prev.len()).collect();
    }
    result.unmatched_new = candidates
        .iter()
        .zip(&taken)
        .filter(|(_, t)| !**t)
        .map(|(&c, _)| c)
        .collect();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cluster_statistics;
    use crate::types::AnchorObservation;

    fn cluster(b: [f64; 4], scores: Vec<f64>) -> Cluster {
        let a = AnchorObservation::new(BBox(b), 0.9, scores).unwrap();
        cluster_statistics(&[&a], 1.0, 1e-6)
    }

    #[test]
    fn empty_prev_leaves_all_new() {
        let cs = vec![cluster([0.0, 0.0, 1.0, 1.0], vec![0.5, 0.5])];
        let r = associate(&[], &cs, &[0], &MotionParams::identity(1.0), 0.3);
        assert!(r.matches.is_empty());
        assert_eq!(r.unmatched_new, vec![0]);
    }

    #[test]
    fn prefers_overlap_and_class() {
        let cs = vec![
            cluster([0.0, 0.0, 10.0, 10.0], vec![0.9, 0.1]),
            cluster([20.0, 0.0, 30.0, 10.0], vec![0.1, 0.9]),
        ];
        let prev = vec![
            ObjectState::new(BBox([20.0, 0.0, 30.0, 10.0]), 1, 0),
            ObjectState::new(BBox([0.0, 0.0, 10.0, 10.0]), 0, 1),
        ];
        let r = associate(&prev, &cs, &[0, 1], &MotionParams::identity(1.0), 0.3);
        assert_eq!(r.matches, vec![(0, 1), (1, 0)]);
        assert!(r.unmatched_new.is_empty() && r.unmatched_prev.is_empty());
    }

    #[test]
    fn gate_rejects_low_overlap() {
        let cs = vec![cluster([0.0, 0.0, 10.0, 10.0], vec![0.5, 0.5])];
        let prev = vec![ObjectState::new(BBox([8.0, 8.0, 18.0, 18.0]), 0, 0)];
        let r = associate(&prev, &cs, &[0], &MotionParams::identity(1.0), 0.3);
        assert!(r.matches.is_empty());
        assert_eq!(r.unmatched_prev, vec![0]);
        assert_eq!(r.unmatched_new, vec![0]);
    }
}
