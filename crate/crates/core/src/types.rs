//! Domain types shared by the model, the filter and the baselines.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form `(x1, y1, x2, y2)`.
///
/// Gaussians in this crate act on the raw 4-vector. Sampled boxes are not
/// re-validated, so geometric helpers tolerate inverted corners and treat
/// them as empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox([x1, y1, x2, y2]);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Domain(format!(
                "invalid box ({x1}, {y1}, {x2}, {y2}): need finite x1 < x2, y1 < y2"
            )))
        }
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        BBox([v[0], v[1], v[2], v[3]])
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.0[0], self.0[1], self.0[2], self.0[3])
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|c| c.is_finite()) && self.0[0] < self.0[2] && self.0[1] < self.0[3]
    }

    pub fn width(&self) -> f64 {
        self.0[2] - self.0[0]
    }

    pub fn height(&self) -> f64 {
        self.0[3] - self.0[1]
    }

    /// Area, zero for inverted boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox([self.0[0] + dx, self.0[1] + dy, self.0[2] + dx, self.0[3] + dy])
    }
}

/// One hypothesized object: location, class and track identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub bbox: BBox,
    pub class_id: usize,
    pub track_id: u64,
}

impl ObjectState {
    pub fn new(bbox: BBox, class_id: usize, track_id: u64) -> Self {
        Self {
            bbox,
            class_id,
            track_id,
        }
    }
}

/// One detector output: box, appearance score and class-score simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorObservation {
    pub bbox: BBox,
    pub appearance: f64,
    pub class_scores: Vec<f64>,
}

impl AnchorObservation {
    pub fn new(bbox: BBox, appearance: f64, class_scores: Vec<f64>) -> Result<Self> {
        let a = Self {
            bbox,
            appearance,
            class_scores,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.appearance > 0.0 && self.appearance < 1.0) {
            return Err(Error::Domain(format!(
                "appearance score {} outside (0, 1)",
                self.appearance
            )));
        }
        if self.class_scores.is_empty() {
            return Err(Error::Domain("empty class score vector".into()));
        }
        if self.class_scores.iter().any(|&k| !(0.0..=1.0).contains(&k)) {
            return Err(Error::Domain("class score outside [0, 1]".into()));
        }
        let sum: f64 = self.class_scores.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("class scores sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn best_class(&self) -> (usize, f64) {
        argmax(&self.class_scores)
    }

    /// Cluster-center score: appearance times best class score.
    pub fn score(&self) -> f64 {
        self.appearance * self.best_class().1
    }
}

/// Index and value of the first maximum (ties resolve to the lowest index).
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Anchors observed in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame_index: usize,
    pub anchors: Vec<AnchorObservation>,
}

/// A greedy-IoU group of anchors with its sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Indices into the frame's anchor list, center first.
    pub anchor_indices: Vec<usize>,
    pub mean: BBox,
    pub scatter: Matrix4<f64>,
    pub count: usize,
    pub fused_class: Vec<f64>,
    pub log_fused_class: Vec<f64>,
    pub inclusion_prob: f64,
    pub log_inclusion: f64,
    pub log_exclusion: f64,
}

/// Matching between the previous frame's objects and this frame's clusters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationResult {
    /// `(prev_object_index, new_cluster_index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_new: Vec<usize>,
    pub unmatched_prev: Vec<usize>,
}

impl AssociationResult {
    pub fn match_for_cluster(&self, cluster: usize) -> Option<usize> {
        self.matches
            .iter()
            .find(|&&(_, c)| c == cluster)
            .map(|&(p, _)| p)
    }
}

/// Linear-Gaussian motion model: mean `A·L + b`, per-coordinate std `exp(s)`.
///
/// Also used as the container for gradients with respect to `(A, b, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub s: Vector4<f64>,
}

impl MotionParams {
    pub const NUM_COORDS: usize = 24;

    pub fn identity(std: f64) -> Self {
        Self {
            a: Matrix4::identity(),
            b: Vector4::zeros(),
            s: Vector4::repeat(std.ln()),
        }
    }

    pub fn zeros() -> Self {
        Self {
            a: Matrix4::zeros(),
            b: Vector4::zeros(),
            s: Vector4::zeros(),
        }
    }

    pub fn variance(&self) -> Vector4<f64> {
        self.s.map(|s| (2.0 * s).exp())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Flattened `[A (row-major), b, s]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::NUM_COORDS);
        for r in 0..4 {
            for c in 0..4 {
                out.push(self.a[(r, c)]);
            }
        }
        out.extend(self.b.iter());
        out.extend(self.s.iter());
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::NUM_COORDS {
            return Err(Error::Input(format!(
                "motion parameter vector has {} entries, expected {}",
                v.len(),
                Self::NUM_COORDS
            )));
        }
        Ok(Self {
            a: Matrix4::from_row_slice(&v[..16]),
            b: Vector4::from_column_slice(&v[16..20]),
            s: Vector4::from_column_slice(&v[20..24]),
        })
    }

    pub fn add_scaled(&mut self, other: &MotionParams, scale: f64) {
        self.a += other.a * scale;
        self.b += other.b * scale;
        self.s += other.s * scale;
    }

    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            a: self.a * scale,
            b: self.b * scale,
            s: self.s * scale,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared() + self.s.norm_squared()).sqrt()
    }
}

/// Hyperparameters of the generative model and the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per-object death probability between frames.
    pub lambda_death: f64,
    /// Poisson rate of new objects per frame.
    pub lambda_birth: f64,
    /// Concentration of the Dirichlet/Beta emissions and cluster scatter scale.
    pub alpha: f64,
    pub prior_mean: Vector4<f64>,
    pub prior_cov: Matrix4<f64>,
    pub num_classes: usize,
    pub motion: MotionParams,
    /// Gate on IoU between predicted and new boxes during association.
    pub iou_min: f64,
    /// Ridge added to cluster scatter matrices.
    pub eps_pd: f64,
    /// Threshold used by greedy anchor clustering.
    pub cluster_iou: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            lambda_death: 0.05,
            lambda_birth: 0.3,
            alpha: 2.0,
            prior_mean: Vector4::new(280.0, 200.0, 360.0, 260.0),
            prior_cov: box_covariance(120.0, 15.0),
            num_classes: 4,
            motion: MotionParams::identity(2.0),
            iou_min: 0.3,
            eps_pd: 1e-6,
            cluster_iou: 0.5,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda_death >= 0.0 && self.lambda_death < 1.0) {
            return fail(format!("lambda_death {} outside [0, 1)", self.lambda_death));
        }
        if !(self.lambda_birth >= 0.0 && self.lambda_birth.is_finite()) {
            return fail(format!("lambda_birth {} must be >= 0", self.lambda_birth));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha {} must be >= 0", self.alpha));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return fail(format!("iou_min {} outside (0, 1]", self.iou_min));
        }
        if !(self.cluster_iou >= 0.0 && self.cluster_iou < 1.0) {
            return fail(format!("cluster_iou {} outside [0, 1)", self.cluster_iou));
        }
        if !(self.eps_pd > 0.0) {
            return fail("eps_pd must be positive".into());
        }
        if !self.motion.is_finite() || !self.prior_mean.iter().all(|v| v.is_finite()) {
            return fail("non-finite motion or prior mean".into());
        }
        if (self.prior_cov - self.prior_cov.transpose()).abs().max() > 1e-9
            || self.prior_cov.cholesky().is_none()
        {
            return fail("prior_cov must be symmetric positive-definite".into());
        }
        Ok(())
    }
}

/// Covariance of a corner-form box whose center has std `center_std` per axis
/// and whose width/height have std `size_std`, independently.
pub fn box_covariance(center_std: f64, size_std: f64) -> Matrix4<f64> {
    let c = center_std * center_std;
    let s = size_std * size_std / 4.0;
    // x1 = cx - w/2, x2 = cx + w/2 (same for y)
    let (same, cross) = (c + s, c - s);
    Matrix4::new(
        same, 0.0, cross, 0.0, //
        0.0, same, 0.0, cross, //
        cross, 0.0, same, 0.0, //
        0.0, cross, 0.0, same,
    )
}
