//! Running trackers on scenes and scoring their output.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{run_baseline, BaselineConfig, BaselineKind};
use crate::error::{Error, Result};
use crate::filter::{extract_tracks, run, FilterConfig, FilterState, TrackOutput};
use crate::metrics::{average_precision, pdq_sequence, ProbDetection};
use crate::parallel::Execution;
use crate::types::{FrameObservations, ModelParams, ObjectState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ParticleFilter,
    Baseline(BaselineKind),
}

impl Method {
    /// The particle filter followed by every baseline.
    pub fn all() -> Vec<Method> {
        std::iter::once(Method::ParticleFilter)
            .chain(BaselineKind::ALL.into_iter().map(Method::Baseline))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ParticleFilter => "pf",
            Method::Baseline(k) => k.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of pf, single, frame-bayes, greedy, greedy-offset, kalman")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pub output: TrackOutput,
    /// Log-marginal estimate of the particle filter; `None` for baselines.
    pub log_marginal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub num_particles: usize,
    pub ess_fraction: f64,
    pub seed: u64,
    pub execution: Execution,
    pub baseline: BaselineConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            num_particles: 200,
            ess_fraction: 0.5,
            seed: 0,
            execution: Execution::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

pub fn run_method(method: Method, frames: &[FrameObservations], params: &ModelParams, settings: &RunSettings) -> Result<TrackRun> {
    params.validate()?;
    match method {
        Method::ParticleFilter => {
            let config = FilterConfig {
                execution: settings.execution,
                ess_fraction: settings.ess_fraction,
                ..FilterConfig::new(settings.num_particles, settings.seed)
            };
            let mut state = FilterState::new(config)?;
            let snapshots = run(&mut state, frames, params)?;
            Ok(TrackRun {
                output: extract_tracks(&snapshots, params.num_classes),
                log_marginal: Some(state.log_marginal),
            })
        }
        Method::Baseline(kind) => Ok(TrackRun {
            output: run_baseline(kind, frames, params, &settings.baseline)?,
            log_marginal: None,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub pdq: f64,
    /// `NaN` when the truth holds no objects.
    pub map: f64,
}

/// Probabilistic detections of a track output, per frame.
pub fn detections(output: &TrackOutput) -> Result<Vec<Vec<ProbDetection>>> {
    output
        .frames
        .iter()
        .map(|(_, f)| f.iter().map(ProbDetection::from_track).collect())
        .collect()
}

/// PDQ over detections with confidence at least `min_confidence` and mAP at
/// IoU 0.5 over all detections.
pub fn evaluate(output: &TrackOutput, truth: &[Vec<ObjectState>], num_classes: usize, min_confidence: f64) -> Result<Scores> {
    let dets = detections(output)?;
    let pdq = pdq_sequence(&dets, truth, min_confidence)?;
    let map = average_precision(&dets, truth, num_classes, 0.5)?.map.unwrap_or(f64::NAN);
    Ok(Scores { pdq, map })
}
