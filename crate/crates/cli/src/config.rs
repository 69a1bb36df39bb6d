//! Run configuration: a TOML file of flat dotted keys (`model.alpha = 2.0`),
//! overridable by `--set key=value`. Unknown keys are rejected.

use std::path::Path;

use d2t_core::baselines::BaselineConfig;
use d2t_core::experiment::Method;
use d2t_core::simulator::SimConfig;
use d2t_core::types::box_covariance;
use d2t_core::vsmc::TrainConfig;
use d2t_core::{Error, ModelParams, MotionParams, Result};
use nalgebra::{Matrix4, Vector4};
use toml::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelParams,
    pub prior_center_std: f64,
    pub prior_size_std: f64,
    pub sim: SimConfig,
    pub emission_center_std: f64,
    pub emission_size_std: f64,
    /// Motion of the simulated truth; the model's when unset.
    pub sim_motion: Option<MotionParams>,
    pub particles: usize,
    pub ess_fraction: f64,
    pub baseline: BaselineConfig,
    pub min_confidence: f64,
    pub train: TrainConfig,
    /// A labelled frame every `label_every` frames.
    pub label_every: usize,
    pub neighbours: usize,
    pub bench_seeds: usize,
    pub methods: Vec<Method>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelParams::default();
        Self {
            seed: 0,
            prior_center_std: 120.0,
            prior_size_std: 15.0,
            sim: SimConfig::default(),
            emission_center_std: 3.0,
            emission_size_std: 2.0,
            sim_motion: None,
            particles: 200,
            ess_fraction: 0.5,
            baseline: BaselineConfig::default(),
            min_confidence: 0.5,
            train: TrainConfig::default(),
            label_every: 10,
            neighbours: 3,
            bench_seeds: 20,
            methods: Method::all(),
            model,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "model.lambda_death",
    "model.lambda_birth",
    "model.alpha",
    "model.num_classes",
    "model.prior_mean",
    "model.prior_center_std",
    "model.prior_size_std",
    "model.motion_a",
    "model.motion_b",
    "model.motion_s",
    "model.iou_min",
    "model.eps_pd",
    "model.cluster_iou",
    "sim.frames",
    "sim.initial_objects",
    "sim.anchor_rate",
    "sim.clutter_rate",
    "sim.emission_center_std",
    "sim.emission_size_std",
    "sim.arena",
    "sim.min_size",
    "sim.occlusion_prob",
    "sim.occlusion_len",
    "sim.motion_a",
    "sim.motion_b",
    "sim.motion_s",
    "filter.particles",
    "filter.ess_fraction",
    "baseline.nms_iou",
    "baseline.link_iou",
    "baseline.inclusion_threshold",
    "baseline.detector_var",
    "eval.min_confidence",
    "train.learning_rate",
    "train.clip_norm",
    "train.plateau_tol",
    "train.plateau_window",
    "train.max_stage1_epochs",
    "train.stage2_epochs",
    "train.particles",
    "train.freeze_a",
    "train.label_every",
    "train.neighbours",
    "bench.seeds",
    "bench.methods",
];

fn float(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(format!("expected a number, got {v}")),
    }
}

fn count(v: &Value) -> std::result::Result<usize, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(format!("expected a non-negative integer, got {v}")),
    }
}

fn floats<const N: usize>(v: &Value) -> std::result::Result<[f64; N], String> {
    let arr = v.as_array().ok_or_else(|| format!("expected an array of {N} numbers, got {v}"))?;
    if arr.len() != N {
        return Err(format!("expected {N} numbers, got {}", arr.len()));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = float(x)?;
    }
    Ok(out)
}

fn set_motion(m: &mut MotionParams, field: &str, v: &Value) -> std::result::Result<(), String> {
    match field {
        "motion_a" => m.a = Matrix4::from_row_slice(&floats::<16>(v)?),
        "motion_b" => m.b = Vector4::from(floats::<4>(v)?),
        "motion_s" => m.s = Vector4::from(floats::<4>(v)?),
        _ => unreachable!("motion field {field}"),
    }
    Ok(())
}

impl RunConfig {
    /// Applies one key. Errors describe the problem without the key.
    pub fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        match key {
            "seed" => {
                self.seed = match v {
                    Value::Integer(i) if *i >= 0 => *i as u64,
                    _ => return Err(format!("expected a non-negative integer, got {v}")),
                }
            }
            "model.lambda_death" => self.model.lambda_death = float(v)?,
            "model.lambda_birth" => self.model.lambda_birth = float(v)?,
            "model.alpha" => self.model.alpha = float(v)?,
            "model.num_classes" => self.model.num_classes = count(v)?,
            "model.prior_mean" => self.model.prior_mean = Vector4::from(floats::<4>(v)?),
            "model.prior_center_std" => self.prior_center_std = float(v)?,
            "model.prior_size_std" => self.prior_size_std = float(v)?,
            "model.motion_a" | "model.motion_b" | "model.motion_s" => set_motion(&mut self.model.motion, &key[6..], v)?,
            "model.iou_min" => self.model.iou_min = float(v)?,
            "model.eps_pd" => self.model.eps_pd = float(v)?,
            "model.cluster_iou" => self.model.cluster_iou = float(v)?,
            "sim.frames" => self.sim.frames = count(v)?,
            "sim.initial_objects" => self.sim.initial_objects = float(v)?,
            "sim.anchor_rate" => self.sim.anchor_rate = float(v)?,
            "sim.clutter_rate" => self.sim.clutter_rate = float(v)?,
            "sim.emission_center_std" => self.emission_center_std = float(v)?,
            "sim.emission_size_std" => self.emission_size_std = float(v)?,
            "sim.arena" => self.sim.arena = floats::<4>(v)?,
            "sim.min_size" => self.sim.min_size = float(v)?,
            "sim.occlusion_prob" => self.sim.occlusion_prob = float(v)?,
            "sim.occlusion_len" => self.sim.occlusion_len = count(v)?,
            "sim.motion_a" | "sim.motion_b" | "sim.motion_s" => {
                let m = self.sim_motion.get_or_insert(self.model.motion);
                set_motion(m, &key[4..], v)?
            }
            "filter.particles" => self.particles = count(v)?,
            "filter.ess_fraction" => self.ess_fraction = float(v)?,
            "baseline.nms_iou" => self.baseline.nms_iou = float(v)?,
            "baseline.link_iou" => self.baseline.link_iou = float(v)?,
            "baseline.inclusion_threshold" => self.baseline.inclusion_threshold = float(v)?,
            "baseline.detector_var" => self.baseline.detector_var = float(v)?,
            "eval.min_confidence" => self.min_confidence = float(v)?,
            "train.learning_rate" => self.train.learning_rate = float(v)?,
            "train.clip_norm" => self.train.clip_norm = float(v)?,
            "train.plateau_tol" => self.train.plateau_tol = float(v)?,
            "train.plateau_window" => self.train.plateau_window = count(v)?,
            "train.max_stage1_epochs" => self.train.max_stage1_epochs = count(v)?,
            "train.stage2_epochs" => self.train.stage2_epochs = count(v)?,
            "train.particles" => self.train.num_particles = count(v)?,
            "train.freeze_a" => self.train.freeze_a = v.as_bool().ok_or_else(|| format!("expected a boolean, got {v}"))?,
            "train.label_every" => self.label_every = count(v)?,
            "train.neighbours" => self.neighbours = count(v)?,
            "bench.seeds" => self.bench_seeds = count(v)?,
            "bench.methods" => {
                let arr = v.as_array().ok_or_else(|| format!("expected an array of method names, got {v}"))?;
                self.methods = arr
                    .iter()
                    .map(|m| {
                        m.as_str()
                            .ok_or_else(|| format!("expected a method name, got {m}"))?
                            .parse::<Method>()
                            .map_err(|e| e.to_string())
                    })
                    .collect::<std::result::Result<_, _>>()?;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the overrides in order. All
    /// problems are reported together.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        let mut errors: Vec<String> = Vec::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            flatten("", &table, &mut entries);
        }
        for o in overrides {
            match parse_override(o) {
                Ok(kv) => entries.push(kv),
                Err(e) => errors.push(e),
            }
        }
        let mut config = RunConfig::default();
        for (k, v) in &entries {
            if let Err(e) = config.set(k, v) {
                errors.push(format!("{k}: {e}"));
            }
        }
        if errors.is_empty() {
            if let Err(e) = config.validate() {
                errors.push(e.to_string());
            }
        }
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_params().validate()?;
        self.sim_config(self.seed).validate()?;
        self.baseline.validate()?;
        self.train.validate()?;
        if self.particles == 0 {
            return Err(Error::Config("filter.particles must be at least 1".into()));
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(Error::Config("filter.ess_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config("eval.min_confidence must lie in [0, 1]".into()));
        }
        if self.label_every == 0 {
            return Err(Error::Config("train.label_every must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("bench.methods is empty".into()));
        }
        Ok(())
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            prior_cov: box_covariance(self.prior_center_std, self.prior_size_std),
            ..self.model.clone()
        }
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        let mut model = self.model_params();
        if let Some(m) = self.sim_motion {
            model.motion = m;
        }
        SimConfig {
            model,
            emission_cov: box_covariance(self.emission_center_std, self.emission_size_std),
            seed,
            ..self.sim.clone()
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

/// `key=value` with `value` read as a TOML value, or as a string when it is
/// not one.
pub fn parse_override(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("--set {s:?}: expected key=value"))?;
    let k = k.trim().to_string();
    let value = format!("x = {}", v.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.trim().to_string()));
    Ok((k, value))
}
