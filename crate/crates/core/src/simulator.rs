//! Synthetic scenes: ground-truth trajectories from the object dynamics and
//! anchors from the emission model, including clutter and occlusion.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::rng::{stream, tag, StreamRng};
use crate::types::{box_covariance, AnchorObservation, BBox, FrameObservations, ModelParams, ObjectState};

const MAX_TRIES: usize = 1000;
const SCORE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Data-generating model.
    pub model: ModelParams,
    pub frames: usize,
    /// Poisson rate of objects at frame 0.
    pub initial_objects: f64,
    /// Extra anchors per object or clutter source: `M ~ 1 + Poisson(rate)`.
    pub anchor_rate: f64,
    /// Poisson rate of clutter sources per frame.
    pub clutter_rate: f64,
    pub emission_cov: Matrix4<f64>,
    /// `(x_min, y_min, x_max, y_max)`.
    pub arena: [f64; 4],
    /// Smallest width and height of a true box.
    pub min_size: f64,
    /// Per-frame probability that a visible object starts an occlusion.
    pub occlusion_prob: f64,
    pub occlusion_len: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::default(),
            frames: 50,
            initial_objects: 3.0,
            anchor_rate: 2.0,
            clutter_rate: 1.0,
            emission_cov: box_covariance(3.0, 2.0),
            arena: [0.0, 0.0, 640.0, 480.0],
            min_size: 4.0,
            occlusion_prob: 0.0,
            occlusion_len: 3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.anchor_rate >= 0.0 && self.clutter_rate >= 0.0 && self.initial_objects >= 0.0) {
            return fail("anchor_rate, clutter_rate and initial_objects must be >= 0");
        }
        if !(self.arena[0] < self.arena[2] && self.arena[1] < self.arena[3]) {
            return fail("arena must have x_min < x_max and y_min < y_max");
        }
        if !(self.min_size > 0.0) {
            return fail("min_size must be positive");
        }
        if self.arena[2] - self.arena[0] < self.min_size || self.arena[3] - self.arena[1] < self.min_size {
            return fail("arena smaller than min_size");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob outside [0, 1]");
        }
        let sym = (self.emission_cov - self.emission_cov.transpose()).abs().max() <= 1e-9;
        if !sym || !(self.emission_cov == Matrix4::zeros() || self.emission_cov.cholesky().is_some()) {
            return fail("emission_cov must be symmetric positive-definite or zero");
        }
        Ok(())
    }
}

/// Ground truth and rendered anchors of a simulated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: Vec<Vec<ObjectState>>,
    /// Per frame and object: whether the object is occluded.
    pub occluded: Vec<Vec<bool>>,
    pub frames: Vec<FrameObservations>,
    /// Per frame and anchor: the track id it was rendered from, `None` for clutter.
    pub sources: Vec<Vec<Option<u64>>>,
}

/// Lower Cholesky factor, or zero for the zero matrix.
fn factor(cov: &Matrix4<f64>) -> Matrix4<f64> {
    if *cov == Matrix4::zeros() {
        Matrix4::zeros()
    } else {
        cov.cholesky().expect("validated covariance").l()
    }
}

fn gaussian<R: Rng + ?Sized>(mean: &Vector4<f64>, l: &Matrix4<f64>, rng: &mut R) -> Vector4<f64> {
    mean + l * Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal))
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn clip(v: &Vector4<f64>, arena: &[f64; 4]) -> BBox {
    BBox([
        v[0].clamp(arena[0], arena[2]),
        v[1].clamp(arena[1], arena[3]),
        v[2].clamp(arena[0], arena[2]),
        v[3].clamp(arena[1], arena[3]),
    ])
}

/// Draws `mean + noise`, clipped to the arena, until it is at least
/// `min_size` wide and tall.
fn draw_true_box<R: Rng + ?Sized>(
    mean: &Vector4<f64>,
    l: &Matrix4<f64>,
    config: &SimConfig,
    rng: &mut R,
) -> Result<BBox> {
    for _ in 0..MAX_TRIES {
        let b = clip(&gaussian(mean, l, rng), &config.arena);
        if b.width() >= config.min_size && b.height() >= config.min_size {
            return Ok(b);
        }
    }
    Err(Error::Numeric(format!("could not draw a valid box around {mean:?}")))
}

fn draw_anchor_box<R: Rng + ?Sized>(mean: &Vector4<f64>, l: &Matrix4<f64>, rng: &mut R) -> Result<BBox> {
    for _ in 0..MAX_TRIES {
        let b = BBox::from_vector(&gaussian(mean, l, rng));
        if b.is_valid() {
            return Ok(b);
        }
    }
    Err(Error::Numeric(format!("could not draw a valid anchor around {mean:?}")))
}

fn open_unit(x: f64) -> f64 {
    x.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// Dirichlet draw with the given concentrations, floored away from zero.
fn dirichlet<R: Rng + ?Sized>(conc: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = conc
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng).max(SCORE_FLOOR))
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= total);
    g
}

/// Per-frame values.
pub type PerFrame<T> = Vec<Vec<T>>;

/// Samples trajectories and occlusion flags for every frame.
pub fn generate_truth(config: &SimConfig) -> Result<(PerFrame<ObjectState>, PerFrame<bool>)> {
    config.validate()?;
    let model = &config.model;
    let prior_l = factor(&model.prior_cov);
    let motion_l = Matrix4::from_diagonal(&model.motion.s.map(f64::exp));
    let mut next_id = 0u64;
    let mut truth: Vec<Vec<ObjectState>> = Vec::with_capacity(config.frames);
    let mut occluded: Vec<Vec<bool>> = Vec::with_capacity(config.frames);
    // remaining occluded frames per live object
    let mut occlusion_left: Vec<usize> = Vec::new();

    for t in 0..config.frames {
        let mut rng: StreamRng = stream(config.seed, &[tag::TRUTH, t as u64]);
        let mut objects = Vec::new();
        let mut left = Vec::new();
        if let Some(prev) = truth.last() {
            for (obj, &rem) in prev.iter().zip(&occlusion_left) {
                if rng.random::<f64>() < model.lambda_death {
                    continue;
                }
                let mean = model.motion.a * obj.bbox.to_vector() + model.motion.b;
                let bbox = draw_true_box(&mean, &motion_l, config, &mut rng)?;
                objects.push(ObjectState::new(bbox, obj.class_id, obj.track_id));
                left.push(rem);
            }
        }
        let births = poisson(
            if t == 0 { config.initial_objects } else { model.lambda_birth },
            &mut rng,
        );
        for _ in 0..births {
            let bbox = draw_true_box(&model.prior_mean, &prior_l, config, &mut rng)?;
            let class_id = rng.random_range(0..model.num_classes);
            objects.push(ObjectState::new(bbox, class_id, next_id));
            next_id += 1;
            left.push(0);
        }
        let mut flags = Vec::with_capacity(objects.len());
        for rem in left.iter_mut() {
            if *rem > 0 {
                *rem -= 1;
                flags.push(true);
            } else if config.occlusion_len > 0 && rng.random::<f64>() < config.occlusion_prob {
                *rem = config.occlusion_len - 1;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        truth.push(objects);
        occluded.push(flags);
        occlusion_left = left;
    }
    Ok((truth, occluded))
}

/// Renders anchors for one frame of ground truth. Returns the frame and the
/// source track id of each anchor.
pub fn render_anchors(
    frame_index: usize,
    objects: &[ObjectState],
    occluded: &[bool],
    config: &SimConfig,
) -> Result<(FrameObservations, Vec<Option<u64>>)> {
    let model = &config.model;
    let alpha = model.alpha;
    let k = model.num_classes;
    let mut rng: StreamRng = stream(config.seed, &[tag::RENDER, frame_index as u64]);
    let emit_l = factor(&config.emission_cov);
    let prior_l = factor(&model.prior_cov);
    let real_e = Beta::new(alpha + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let clutter_e = Beta::new(1.0, alpha + 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let flat = vec![1.0; k];

    let mut anchors = Vec::new();
    let mut sources = Vec::new();
    for (obj, &occ) in objects.iter().zip(occluded) {
        let m = 1 + poisson(config.anchor_rate, &mut rng);
        let mut conc = flat.clone();
        conc[obj.class_id] += alpha;
        for _ in 0..m {
            let bbox = draw_anchor_box(&obj.bbox.to_vector(), &emit_l, &mut rng)?;
            let e = if occ { clutter_e.sample(&mut rng) } else { real_e.sample(&mut rng) };
            anchors.push(AnchorObservation::new(bbox, open_unit(e), dirichlet(&conc, &mut rng))?);
            sources.push(Some(obj.track_id));
        }
    }
    for _ in 0..poisson(config.clutter_rate, &mut rng) {
        let center = draw_anchor_box(&model.prior_mean, &prior_l, &mut rng)?.to_vector();
        let m = 1 + poisson(config.anchor_rate, &mut rng);
        for _ in 0..m {
            let bbox = draw_anchor_box(&center, &emit_l, &mut rng)?;
            let e = clutter_e.sample(&mut rng);
            anchors.push(AnchorObservation::new(bbox, open_unit(e), dirichlet(&flat, &mut rng))?);
            sources.push(None);
        }
    }
    Ok((FrameObservations { frame_index, anchors }, sources))
}

/// Generates ground truth and renders every frame.
pub fn simulate(config: &SimConfig, execution: Execution) -> Result<Scene> {
    let (truth, occluded) = generate_truth(config)?;
    let rendered: Vec<Result<(FrameObservations, Vec<Option<u64>>)>> =
        execution.map(&truth, |t, objects| render_anchors(t, objects, &occluded[t], config));
    let mut frames = Vec::with_capacity(truth.len());
    let mut sources = Vec::with_capacity(truth.len());
    for r in rendered {
        let (f, s) = r?;
        frames.push(f);
        sources.push(s);
    }
    Ok(Scene {
        truth,
        occluded,
        frames,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn quiet() -> SimConfig {
        SimConfig {
            frames: 20,
            clutter_rate: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn no_births_no_objects() {
        let cfg = SimConfig {
            initial_objects: 0.0,
            model: ModelParams {
                lambda_birth: 0.0,
                ..ModelParams::default()
            },
            ..quiet()
        };
        let scene = simulate(&cfg, Execution::Sequential).unwrap();
        assert!(scene.truth.iter().all(|f| f.is_empty()));
        assert!(scene.frames.iter().all(|f| f.anchors.is_empty()));
    }

    #[test]
    fn no_deaths_keep_tracks_and_classes() {
        let cfg = SimConfig {
            model: ModelParams {
                lambda_death: 0.0,
                ..ModelParams::default()
            },
            ..quiet()
        };
        let (truth, _) = generate_truth(&cfg).unwrap();
        let mut class_of = HashMap::new();
        for w in truth.windows(2) {
            for o in &w[0] {
                assert!(w[1].iter().any(|n| n.track_id == o.track_id));
            }
        }
        for f in &truth {
            for o in f {
                assert_eq!(*class_of.entry(o.track_id).or_insert(o.class_id), o.class_id);
                assert!(o.bbox.width() >= cfg.min_size && o.bbox.height() >= cfg.min_size);
            }
        }
    }

    #[test]
    fn birth_rate_matches() {
        let cfg = SimConfig {
            frames: 10_000,
            initial_objects: 0.0,
            model: ModelParams {
                lambda_death: 1.0 - 1e-12,
                lambda_birth: 0.4,
                ..ModelParams::default()
            },
            ..quiet()
        };
        let (truth, _) = generate_truth(&cfg).unwrap();
        let n = truth.len() as f64;
        let mean = truth.iter().map(|f| f.len() as f64).sum::<f64>() / n;
        assert!((mean - 0.4).abs() < 3.0 * (0.4f64 / n).sqrt(), "{mean}");
    }

    #[test]
    fn zero_emission_noise_reproduces_truth() {
        let cfg = SimConfig {
            emission_cov: Matrix4::zeros(),
            ..quiet()
        };
        let scene = simulate(&cfg, Execution::Sequential).unwrap();
        for (t, f) in scene.frames.iter().enumerate() {
            for (a, src) in f.anchors.iter().zip(&scene.sources[t]) {
                let obj = scene.truth[t].iter().find(|o| Some(o.track_id) == *src).unwrap();
                assert_eq!(a.bbox, obj.bbox);
            }
        }
    }

    #[test]
    fn real_appearance_mean() {
        let alpha = 2.0;
        let objs = vec![ObjectState::new(BBox([10.0, 10.0, 50.0, 50.0]), 0, 0)];
        let cfg = SimConfig {
            anchor_rate: 0.0,
            ..quiet()
        };
        let n = 10_000;
        let es: Vec<f64> = (0..n)
            .map(|t| render_anchors(t, &objs, &[false], &cfg).unwrap().0.anchors[0].appearance)
            .collect();
        let mean = es.iter().sum::<f64>() / n as f64;
        let (a, b) = (alpha + 1.0, 1.0);
        let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        assert!((mean - a / (a + b)).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn deterministic_across_execution() {
        let cfg = SimConfig {
            seed: 9,
            ..SimConfig::default()
        };
        assert_eq!(
            simulate(&cfg, Execution::Sequential).unwrap(),
            simulate(&cfg, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn occlusion_lowers_appearance() {
        let cfg = SimConfig {
            occlusion_prob: 1.0,
            occlusion_len: 4,
            ..quiet()
        };
        let scene = simulate(&cfg, Execution::Sequential).unwrap();
        assert!(scene.occluded.iter().flatten().all(|&o| o));
        let mean: Vec<f64> = scene.frames.iter().flat_map(|f| f.anchors.iter().map(|a| a.appearance)).collect();
        assert!(mean.iter().sum::<f64>() / (mean.len() as f64) < 0.5);
    }
}
