//! Greedy IoU clustering of anchors and cluster sufficient statistics.

use std::cmp::Ordering;

use nalgebra::{Matrix4, Vector4};

use crate::math::{log_add_exp, log_sum_exp, xlny};
use crate::types::{AnchorObservation, BBox, Cluster, FrameObservations, ModelParams};

/// Intersection over union. Inverted or empty boxes yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.0[2].min(b.0[2]) - a.0[0].max(b.0[0])).max(0.0);
    let iy = (a.0[3].min(b.0[3]) - a.0[1].max(b.0[1])).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Total order on anchors: score descending, then box, appearance and class
/// scores, so clustering does not depend on input order.
fn canonical_cmp(a: &AnchorObservation, b: &AnchorObservation) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| {
            a.bbox
                .0
                .iter()
                .zip(b.bbox.0.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.appearance.total_cmp(&b.appearance))
        .then_with(|| {
            a.class_scores
                .iter()
                .zip(b.class_scores.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Groups anchors greedily: the highest-scoring unassigned anchor becomes a
/// center and absorbs every unassigned anchor with IoU above the threshold.
///
/// Groups come out in selection order; members are in canonical order with
/// the center first.
pub fn cluster_anchors(frame: &FrameObservations, iou_threshold: f64) -> Vec<Vec<usize>> {
    let anchors = &frame.anchors;
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&i, &j| canonical_cmp(&anchors[i], &anchors[j]));

    let mut assigned = vec![false; anchors.len()];
    let mut groups = Vec::new();
    for (pos, &center) in order.iter().enumerate() {
        if assigned[center] {
            continue;
        }
        assigned[center] = true;
        let mut group = vec![center];
        for &other in &order[pos + 1..] {
            if !assigned[other] && iou(&anchors[center].bbox, &anchors[other].bbox) > iou_threshold {
                assigned[other] = true;
                group.push(other);
            }
        }
        groups.push(group);
    }
    groups
}

/// Fused box, scatter, class and inclusion statistics of one group of anchors.
pub fn cluster_statistics(
    members: &[&AnchorObservation],
    alpha: f64,
    eps_pd: f64,
) -> Cluster {
    assert!(!members.is_empty(), "cluster needs at least one anchor");
    let m = members.len() as f64;
    let mean = members
        .iter()
        .fold(Vector4::zeros(), |acc, a| acc + a.bbox.to_vector())
        / m;
    // alpha/M * sum(x x^T) - alpha * mean mean^T, in centered form
    let mut scatter = members.iter().fold(Matrix4::zeros(), |acc, a| {
        let d = a.bbox.to_vector() - mean;
        acc + d * d.transpose()
    }) * (alpha / m);
    scatter = (scatter + scatter.transpose()) * 0.5 + Matrix4::identity() * eps_pd;

    let k = members[0].class_scores.len();
    let class_logits: Vec<f64> = (0..k)
        .map(|c| members.iter().map(|a| xlny(alpha, a.class_scores[c])).sum())
        .collect();
    let norm = log_sum_exp(&class_logits);
    let log_fused_class: Vec<f64> = class_logits.iter().map(|l| l - norm).collect();
    let fused_class = log_fused_class.iter().map(|l| l.exp()).collect();

    let real: f64 = members.iter().map(|a| xlny(alpha, a.appearance)).sum();
    let clutter: f64 = members.iter().map(|a| xlny(alpha, 1.0 - a.appearance)).sum();
    let z = log_add_exp(real, clutter);
    let log_inclusion = real - z;
    let log_exclusion = clutter - z;

    Cluster {
        anchor_indices: Vec::new(),
        mean: BBox::from_vector(&mean),
        scatter,
        count: members.len(),
        fused_class,
        log_fused_class,
        inclusion_prob: log_inclusion.exp(),
        log_inclusion,
        log_exclusion,
    }
}

/// Clusters a frame and computes statistics for every cluster.
pub fn build_clusters(frame: &FrameObservations, params: &ModelParams) -> Vec<Cluster> {
    cluster_anchors(frame, params.cluster_iou)
        .into_iter()
        .map(|group| {
            let members: Vec<&AnchorObservation> =
                group.iter().map(|&i| &frame.anchors[i]).collect();
            let mut c = cluster_statistics(&members, params.alpha, params.eps_pd);
            c.anchor_indices = group;
            c
        })
        .collect()
}
