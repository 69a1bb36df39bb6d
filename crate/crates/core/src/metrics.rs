//! Detection metrics: average precision at an IoU threshold and the
//! probability-based detection quality (PDQ).
//!
//! PDQ here scores a detection against a ground-truth box as the geometric
//! mean of a spatial quality and a label quality. The spatial quality is the
//! exponentiated mean over the two corners of the Gaussian log-likelihood of
//! the true corner minus its maximum, `exp(-¼ Σ_c d_c²)` with `d_c` the
//! corner's Mahalanobis distance. The label quality is the detection's
//! probability of the true class.

use nalgebra::{Matrix2, Matrix4, Vector2};

use crate::assignment::solve_max;
use crate::clustering::iou;
use crate::error::{Error, Result};
use crate::filter::TrackEstimate;
use crate::types::{BBox, ObjectState};

const SIMPLEX_TOL: f64 = 1e-6;

/// A detection with Gaussian corners and a class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDetection {
    /// `(x1, y1)` and `(x2, y2)`.
    pub corners: [Vector2<f64>; 2],
    pub corner_covs: [Matrix2<f64>; 2],
    pub class_probs: Vec<f64>,
    /// Existence confidence, used for ranking and thresholding.
    pub confidence: f64,
}

impl ProbDetection {
    pub fn new(
        corners: [Vector2<f64>; 2],
        corner_covs: [Matrix2<f64>; 2],
        class_probs: Vec<f64>,
        confidence: f64,
    ) -> Result<Self> {
        for c in &corner_covs {
            let sym = (c - c.transpose()).abs().max() <= 1e-9 * c.abs().max().max(1.0);
            if !sym || c.cholesky().is_none() {
                return Err(Error::Numeric(format!("corner covariance is not SPD: {c:?}")));
            }
        }
        let total: f64 = class_probs.iter().sum();
        if class_probs.is_empty() || class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("class distribution not on the simplex: {class_probs:?}")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Domain(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            corners,
            corner_covs,
            class_probs,
            confidence,
        })
    }

    /// Corner blocks of a 4×4 box covariance.
    pub fn from_box(bbox: &BBox, cov: &Matrix4<f64>, class_probs: Vec<f64>, confidence: f64) -> Result<Self> {
        let b = bbox.0;
        Self::new(
            [Vector2::new(b[0], b[1]), Vector2::new(b[2], b[3])],
            [cov.fixed_view::<2, 2>(0, 0).into_owned(), cov.fixed_view::<2, 2>(2, 2).into_owned()],
            class_probs,
            confidence,
        )
    }

    /// Isotropic corner covariance `var·I`.
    pub fn isotropic(bbox: &BBox, var: f64, class_probs: Vec<f64>, confidence: f64) -> Result<Self> {
        Self::from_box(bbox, &(Matrix4::identity() * var), class_probs, confidence)
    }

    pub fn from_track(track: &TrackEstimate) -> Result<Self> {
        Self::from_box(&track.bbox, &track.cov, track.class_probs.clone(), track.confidence)
    }

    pub fn bbox(&self) -> BBox {
        BBox([self.corners[0][0], self.corners[0][1], self.corners[1][0], self.corners[1][1]])
    }

    /// Most probable class, first on ties.
    pub fn class_id(&self) -> usize {
        crate::types::argmax(&self.class_probs).0
    }
}

/// `exp(-¼ Σ_c d_c²)` over the two corners.
pub fn spatial_quality(det: &ProbDetection, gt: &BBox) -> f64 {
    let truth = [Vector2::new(gt.0[0], gt.0[1]), Vector2::new(gt.0[2], gt.0[3])];
    let total: f64 = (0..2)
        .map(|c| {
            let d = truth[c] - det.corners[c];
            let inv = det.corner_covs[c].cholesky().expect("validated covariance").inverse();
            d.dot(&(inv * d))
        })
        .sum();
    (-0.25 * total).exp()
}

pub fn label_quality(det: &ProbDetection, class_id: usize) -> f64 {
    det.class_probs.get(class_id).copied().unwrap_or(0.0)
}

pub fn pdq_pairwise(det: &ProbDetection, gt: &ObjectState) -> f64 {
    (spatial_quality(det, &gt.bbox) * label_quality(det, gt.class_id)).sqrt()
}

/// Pairwise qualities below this count as zero when assigning, so that a
/// pair whose quality vanishes in the summed score is never a true positive.
pub const MIN_QUALITY: f64 = 1e-12;

/// Optimal one-to-one assignment of detections to ground truth maximizing
/// the summed pairwise quality. Returns the summed quality and the number of
/// true positives (assigned pairs with quality of at least [`MIN_QUALITY`]).
pub fn pdq_assignment(dets: &[ProbDetection], gts: &[ObjectState]) -> (f64, usize) {
    if dets.is_empty() || gts.is_empty() {
        return (0.0, 0);
    }
    let q: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            gts.iter()
                .map(|g| pdq_pairwise(d, g))
                .map(|v| if v < MIN_QUALITY { 0.0 } else { v })
                .collect()
        })
        .collect();
    let assignment = solve_max(&q);
    let mut total = 0.0;
    let mut tp = 0;
    for (i, a) in assignment.iter().enumerate() {
        if let Some(j) = *a {
            if q[i][j] > 0.0 {
                total += q[i][j];
                tp += 1;
            }
        }
    }
    (total, tp)
}

/// Summed assigned quality over `TP + FP + FN`; 1 when both sets are empty.
pub fn pdq_frame(dets: &[ProbDetection], gts: &[ObjectState]) -> f64 {
    if dets.is_empty() && gts.is_empty() {
        return 1.0;
    }
    let (total, tp) = pdq_assignment(dets, gts);
    total / (dets.len() + gts.len() - tp) as f64
}

/// Mean of [`pdq_frame`] over frames, keeping detections with confidence at
/// least `min_confidence`.
pub fn pdq_sequence(dets: &[Vec<ProbDetection>], truth: &[Vec<ObjectState>], min_confidence: f64) -> Result<f64> {
    check_lengths(dets.len(), truth.len())?;
    if dets.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = dets
        .iter()
        .zip(truth)
        .map(|(d, g)| {
            let kept: Vec<ProbDetection> = d.iter().filter(|x| x.confidence >= min_confidence).cloned().collect();
            pdq_frame(&kept, g)
        })
        .sum();
    Ok(total / dets.len() as f64)
}

fn check_lengths(dets: usize, truth: usize) -> Result<()> {
    if dets != truth {
        return Err(Error::Input(format!("{dets} detection frames for {truth} ground-truth frames")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
}

/// Average precision per class with all-point interpolation of the
/// precision-recall curve. Detections are ranked by confidence (earlier
/// frame and index first on ties); each is a true positive when the
/// same-class ground truth of highest IoU in its frame reaches the threshold
/// and is still unmatched.
pub fn average_precision(
    dets: &[Vec<ProbDetection>],
    truth: &[Vec<ObjectState>],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<ApReport> {
    check_lengths(dets.len(), truth.len())?;
    for (t, frame) in dets.iter().enumerate() {
        for d in frame {
            if d.confidence.is_nan() || d.class_probs.len() != num_classes {
                return Err(Error::Input(format!("frame {t}: detection with invalid confidence or class count")));
            }
        }
    }
    for frame in truth {
        if let Some(o) = frame.iter().find(|o| o.class_id >= num_classes) {
            return Err(Error::Input(format!("ground-truth class {} out of range", o.class_id)));
        }
    }

    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|class| {
            let n_gt = truth.iter().map(|f| f.iter().filter(|o| o.class_id == class).count()).sum::<usize>();
            if n_gt == 0 {
                return None;
            }
            let mut ranked: Vec<(usize, usize, f64)> = dets
                .iter()
                .enumerate()
                .flat_map(|(t, f)| {
                    f.iter()
                        .enumerate()
                        .filter(|(_, d)| d.class_id() == class)
                        .map(move |(i, d)| (t, i, d.confidence))
                })
                .collect();
            ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut matched: Vec<Vec<bool>> = truth.iter().map(|f| vec![false; f.len()]).collect();
            let mut hits = Vec::with_capacity(ranked.len());
            for &(t, i, _) in &ranked {
                let bbox = dets[t][i].bbox();
                let best = truth[t]
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.class_id == class)
                    .map(|(j, o)| (j, iou(&bbox, &o.bbox)))
                    .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((j, v)),
                    });
                let hit = match best {
                    Some((j, v)) if v >= iou_threshold && !matched[t][j] => {
                        matched[t][j] = true;
                        true
                    }
                    _ => false,
                };
                hits.push(hit);
            }
            Some(interpolated_ap(&hits, n_gt))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(ApReport { per_class, map })
}

/// Area under the all-point interpolated precision-recall curve of a ranked
/// list of hits.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - last) * p;
        last = *r;
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn det(bbox: BBox, var: f64, probs: Vec<f64>, conf: f64) -> ProbDetection {
        ProbDetection::isotropic(&bbox, var, probs, conf).unwrap()
    }

    fn gt(bbox: BBox, class: usize) -> ObjectState {
        ObjectState::new(bbox, class, 0)
    }

    const B: BBox = BBox([0.0, 0.0, 10.0, 10.0]);

    #[test]
    fn perfect_detection_scores_one() {
        assert_eq!(pdq_pairwise(&det(B, 1e-12, vec![1.0, 0.0], 1.0), &gt(B, 0)), 1.0);
    }

    #[test]
    fn wrong_class_scores_zero() {
        assert_eq!(pdq_pairwise(&det(B, 1.0, vec![0.0, 1.0], 1.0), &gt(B, 0)), 0.0);
    }

    #[test]
    fn geometric_mean_of_qualities() {
        let d = det(B.translate(1.0, 0.0), 2.0, vec![0.3, 0.7], 1.0);
        let q = spatial_quality(&d, &B);
        assert_relative_eq!(q, (-0.25f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(pdq_pairwise(&d, &gt(B, 1)), (q * 0.7).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn frame_examples() {
        assert_eq!(pdq_frame(&[], &[]), 1.0);
        let perfect = det(B, 1.0, vec![1.0], 1.0);
        assert_eq!(pdq_frame(std::slice::from_ref(&perfect), &[gt(B, 0)]), 1.0);
        let far = det(BBox([500.0, 500.0, 510.0, 510.0]), 1.0, vec![1.0], 1.0);
        assert_eq!(pdq_frame(&[perfect, far], &[gt(B, 0)]), 0.5);
        assert_eq!(pdq_frame(&[], &[gt(B, 0)]), 0.0);
    }

    #[test]
    fn ap_examples() {
        let one = |b: BBox, conf: f64| det(b, 1.0, vec![1.0], conf);
        let truth = vec![vec![gt(B, 0)]];
        // IoU 0.6 and 0.4
        let hit = BBox([0.0, 0.0, 10.0, 6.0]);
        let miss = BBox([0.0, 0.0, 10.0, 4.0]);
        assert_eq!(average_precision(&[vec![one(hit, 0.9)]], &truth, 1, 0.5).unwrap().map, Some(1.0));
        assert_eq!(average_precision(&[vec![one(miss, 0.9)]], &truth, 1, 0.5).unwrap().map, Some(0.0));

        let other = BBox([100.0, 100.0, 110.0, 110.0]);
        let truth = vec![vec![gt(B, 0), gt(other, 0)]];
        let dets = vec![vec![one(B, 0.9), one(BBox([50.0, 50.0, 60.0, 60.0]), 0.95), one(other, 0.8)]];
        assert_relative_eq!(average_precision(&dets, &truth, 1, 0.5).unwrap().map.unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn classes_without_truth_are_excluded() {
        let r = average_precision(&[vec![]], &[vec![gt(B, 1)]], 3, 0.5).unwrap();
        assert_eq!(r.per_class, vec![None, Some(0.0), None]);
        assert_eq!(r.map, Some(0.0));
        assert_eq!(average_precision(&[vec![]], &[vec![]], 2, 0.5).unwrap().map, None);
    }

    #[test]
    fn invalid_detections_rejected() {
        assert!(ProbDetection::isotropic(&B, 0.0, vec![1.0], 0.5).is_err());
        assert!(ProbDetection::isotropic(&B, 1.0, vec![0.5, 0.4], 0.5).is_err());
        assert!(ProbDetection::isotropic(&B, 1.0, vec![1.0], 1.5).is_err());
    }

    #[test]
    fn confidence_threshold_drops_detections() {
        let d = vec![vec![det(B, 1.0, vec![1.0], 0.4)]];
        let t = vec![vec![gt(B, 0)]];
        assert_eq!(pdq_sequence(&d, &t, 0.5).unwrap(), 0.0);
        assert_eq!(pdq_sequence(&d, &t, 0.3).unwrap(), 1.0);
    }
}
