//! Subcommand implementations. Each writes its files and returns a JSON
//! report for stdout.

use std::io::Write;
use std::path::{Path, PathBuf};

use d2t_core::experiment::{evaluate, run_method, Method, RunSettings, Scores};
use d2t_core::filter::TrackOutput;
use d2t_core::metrics::{average_precision, pdq_sequence};
use d2t_core::parallel::Execution;
use d2t_core::rng::{derive_seed, tag};
use d2t_core::simulator::simulate;
use d2t_core::vsmc::{batches_from_sequence, train, TrainConfig};
use d2t_core::{Error, ModelParams, MotionParams, ObjectState, Result};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::io::{create_output, read_frames, read_tracks, read_truth, write_frames, write_tracks, write_truth, SCHEMA_VERSION};

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub execution: Execution,
    pub force: bool,
}

impl Context {
    fn settings(&self, seed: u64) -> RunSettings {
        RunSettings {
            num_particles: self.config.particles,
            ess_fraction: self.config.ess_fraction,
            seed,
            execution: self.execution,
            baseline: self.config.baseline.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes `rows` under `header` to a new CSV file.
fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R], force: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create_output(path, force)?);
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `simulate`: writes `frames.jsonl` (with anchor sources) and `truth.jsonl`
/// into `out`.
pub fn cmd_simulate(ctx: &Context, out: &Path) -> Result<Value> {
    let scene = simulate(&ctx.config.sim_config(ctx.config.seed), ctx.execution)?;
    let frames = out.join(FRAMES_FILE);
    let truth = out.join(TRUTH_FILE);
    write_frames(&frames, &scene.frames, Some(&scene.sources), ctx.force)?;
    write_truth(&truth, &scene.frames, &scene.truth, ctx.force)?;
    Ok(json!({
        "frames": scene.frames.len(),
        "anchors": scene.frames.iter().map(|f| f.anchors.len()).sum::<usize>(),
        "objects": scene.truth.iter().map(Vec::len).sum::<usize>(),
        "frames_file": frames,
        "truth_file": truth,
    }))
}

/// Trained motion parameters on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub v: u32,
    pub motion: MotionRecord,
    /// Parameters after the labelled-only stage.
    pub stage1: MotionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRecord {
    /// Row-major.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
}

impl From<&MotionParams> for MotionRecord {
    fn from(m: &MotionParams) -> Self {
        Self {
            a: (0..16).map(|i| m.a[(i / 4, i % 4)]).collect(),
            b: m.b.iter().copied().collect(),
            s: m.s.iter().copied().collect(),
        }
    }
}

impl MotionRecord {
    pub fn to_motion(&self) -> std::result::Result<MotionParams, String> {
        if self.a.len() != 16 || self.b.len() != 4 || self.s.len() != 4 {
            return Err("motion needs 16 entries in a and 4 in b and s".into());
        }
        let m = MotionParams {
            a: Matrix4::from_row_slice(&self.a),
            b: Vector4::from_row_slice(&self.b),
            s: Vector4::from_row_slice(&self.s),
        };
        if !m.is_finite() {
            return Err("non-finite motion parameters".into());
        }
        Ok(m)
    }
}

pub fn read_params(path: &Path) -> Result<MotionParams> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let file: ParamsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.v != SCHEMA_VERSION {
        return Err(parse(format!("unsupported schema version {}, expected {SCHEMA_VERSION}", file.v)));
    }
    file.motion.to_motion().map_err(parse)
}

fn model_with(ctx: &Context, params: Option<&Path>) -> Result<ModelParams> {
    let mut model = ctx.config.model_params();
    if let Some(p) = params {
        model.motion = read_params(p)?;
    }
    model.validate()?;
    Ok(model)
}

/// `track`: runs `method` on a frames file and writes the track file.
pub fn cmd_track(ctx: &Context, frames: &Path, method: Method, params: Option<&Path>, out: &Path) -> Result<Value> {
    let model = model_with(ctx, params)?;
    let file = read_frames(frames)?;
    check_classes(&file.frames, model.num_classes, frames)?;
    let run = run_method(method, &file.frames, &model, &ctx.settings(ctx.config.seed))?;
    write_tracks(out, &run.output, ctx.force)?;
    Ok(json!({
        "method": method.name(),
        "frames": file.frames.len(),
        "estimates": run.output.frames.iter().map(|(_, f)| f.len()).sum::<usize>(),
        "log_marginal": run.log_marginal,
        "tracks_file": out,
    }))
}

fn check_classes(frames: &[d2t_core::FrameObservations], num_classes: usize, path: &Path) -> Result<()> {
    for f in frames {
        if let Some(a) = f.anchors.iter().find(|a| a.class_scores.len() != num_classes) {
            return Err(Error::Input(format!(
                "{}: frame {} has {} class scores, model.num_classes is {num_classes}",
                path.display(),
                f.frame_index,
                a.class_scores.len()
            )));
        }
    }
    Ok(())
}

/// Indices of labelled frames: every `every`-th frame starting at 0.
pub fn labelled_frames(num_frames: usize, every: usize) -> Vec<usize> {
    (0..num_frames).step_by(every.max(1)).collect()
}

#[derive(Serialize)]
struct CurveRow {
    stage: u8,
    epoch: usize,
    objective: f64,
    grad_norm: f64,
}

/// Path of the loss curve written next to a params file.
pub fn curve_path(params_out: &Path) -> PathBuf {
    params_out.with_extension("curve.csv")
}

/// `train`: reads `frames.jsonl` and `truth.jsonl` from `dataset`, trains
/// on every `label_every`-th frame with `neighbours` unlabelled frames on each
/// side and writes the params file plus its loss curve.
pub fn cmd_train(ctx: &Context, dataset: &Path, out: &Path) -> Result<Value> {
    let model = ctx.config.model_params();
    let frames_path = dataset.join(FRAMES_FILE);
    let truth_path = dataset.join(TRUTH_FILE);
    let file = read_frames(&frames_path)?;
    check_classes(&file.frames, model.num_classes, &frames_path)?;
    let sources = file
        .sources
        .ok_or_else(|| Error::Input(format!("{}: training needs a src on every anchor", frames_path.display())))?;
    let truth = aligned_truth(&truth_path, &file.frames, model.num_classes)?;
    let labelled = labelled_frames(file.frames.len(), ctx.config.label_every);
    let dataset = batches_from_sequence(&file.frames, &truth, &sources, &labelled, ctx.config.neighbours)?;
    let config = TrainConfig {
        seed: ctx.config.seed,
        execution: ctx.execution,
        ..ctx.config.train.clone()
    };
    let outcome = train(&dataset, &model, &config)?;
    let curve = curve_path(out);
    let params = ParamsFile {
        v: SCHEMA_VERSION,
        motion: (&outcome.params).into(),
        stage1: (&outcome.stage1).into(),
    };
    let mut w = create_output(out, ctx.force)?;
    serde_json::to_writer_pretty(&mut w, &params).map_err(|e| io_err(out)(e.into()))?;
    w.write_all(b"\n").map_err(io_err(out))?;
    let rows: Vec<CurveRow> = outcome
        .curve
        .iter()
        .map(|r| CurveRow {
            stage: r.stage,
            epoch: r.epoch,
            objective: r.objective,
            grad_norm: r.grad_norm,
        })
        .collect();
    write_csv(&curve, &["stage", "epoch", "objective", "grad_norm"], &rows, ctx.force)?;
    Ok(json!({
        "labelled_frames": labelled.len(),
        "epochs": outcome.curve.len(),
        "params_file": out,
        "curve_file": curve,
    }))
}

/// Truth per frame of `frames`, matched by frame index.
fn aligned_truth(path: &Path, frames: &[d2t_core::FrameObservations], num_classes: usize) -> Result<Vec<Vec<ObjectState>>> {
    let mut truth = read_truth(path, num_classes)?.into_iter();
    frames
        .iter()
        .map(|f| match truth.next() {
            Some((t, objs)) if t == f.frame_index => Ok(objs),
            Some((t, _)) => Err(Error::Input(format!("{}: frame {t} where frame {} was expected", path.display(), f.frame_index))),
            None => Err(Error::Input(format!("{}: no truth for frame {}", path.display(), f.frame_index))),
        })
        .collect()
}

#[derive(Serialize)]
struct EvalRow<'a> {
    method: &'a str,
    frame_or_video: String,
    pdq: f64,
    map: f64,
}

/// `eval`: scores a track file against a truth file, one row per truth frame
/// then a `video` row over the whole sequence.
pub fn cmd_eval(ctx: &Context, tracks: &Path, truth: &Path, label: &str, out: &Path) -> Result<Value> {
    let k = ctx.config.model.num_classes;
    let truth = read_truth(truth, k)?;
    let pred = read_tracks(tracks, k, ctx.config.baseline.detector_var)?;
    let aligned = align_predictions(&pred, &truth, tracks)?;
    let objects: Vec<Vec<ObjectState>> = truth.iter().map(|(_, o)| o.clone()).collect();
    let dets = d2t_core::experiment::detections(&aligned)?;
    let mut rows = Vec::with_capacity(truth.len() + 1);
    for (i, (t, gts)) in truth.iter().enumerate() {
        let one = std::slice::from_ref(&dets[i]);
        let gt = std::slice::from_ref(gts);
        rows.push(EvalRow {
            method: label,
            frame_or_video: t.to_string(),
            pdq: pdq_sequence(one, gt, ctx.config.min_confidence)?,
            map: average_precision(one, gt, k, 0.5)?.map.unwrap_or(f64::NAN),
        });
    }
    let Scores { pdq, map } = evaluate(&aligned, &objects, k, ctx.config.min_confidence)?;
    rows.push(EvalRow {
        method: label,
        frame_or_video: "video".into(),
        pdq,
        map,
    });
    write_csv(out, &["method", "frame_or_video", "pdq", "map"], &rows, ctx.force)?;
    Ok(json!({ "method": label, "frames": truth.len(), "pdq": finite(pdq), "map": finite(map), "eval_file": out }))
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Predictions reordered to the truth frames; frames without predictions are
/// empty.
fn align_predictions(pred: &TrackOutput, truth: &[(usize, Vec<ObjectState>)], path: &Path) -> Result<TrackOutput> {
    let mut by_frame = std::collections::BTreeMap::new();
    for (t, objs) in &pred.frames {
        if by_frame.insert(*t, objs.clone()).is_some() {
            return Err(Error::Input(format!("{}: frame {t} appears twice", path.display())));
        }
    }
    let frames = truth.iter().map(|(t, _)| (*t, by_frame.remove(t).unwrap_or_default())).collect();
    if let Some(t) = by_frame.keys().next() {
        return Err(Error::Input(format!("{}: frame {t} has no truth", path.display())));
    }
    Ok(TrackOutput { frames })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub seed: usize,
    pub pdq: f64,
    pub map: f64,
}

/// Scores every method on `bench_seeds` simulated scenes. Rows are ordered by
/// method, then seed.
pub fn bench_rows(ctx: &Context) -> Result<Vec<BenchRow>> {
    let c = &ctx.config;
    let model = c.model_params();
    let seeds = c.bench_seeds;
    let scenes = ctx
        .execution
        .map_range(seeds, |s| simulate(&c.sim_config(derive_seed(c.seed, &[tag::BENCH, s as u64])), Execution::Sequential))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let methods = &c.methods;
    ctx.execution
        .map_range(methods.len() * seeds, |job| {
            let (m, s) = (job / seeds, job % seeds);
            let settings = RunSettings {
                execution: Execution::Sequential,
                ..ctx.settings(derive_seed(c.seed, &[tag::BENCH, s as u64, 1]))
            };
            let run = run_method(methods[m], &scenes[s].frames, &model, &settings)?;
            let Scores { pdq, map } = evaluate(&run.output, &scenes[s].truth, model.num_classes, c.min_confidence)?;
            Ok(BenchRow {
                method: methods[m].name().to_string(),
                seed: s,
                pdq,
                map,
            })
        })
        .into_iter()
        .collect()
}

/// `bench`: writes the rows of [`bench_rows`] as CSV.
pub fn cmd_bench(ctx: &Context, out: &Path) -> Result<Value> {
    let rows = bench_rows(ctx)?;
    write_csv(out, &["method", "seed", "pdq", "map"], &rows, ctx.force)?;
    let summary: Vec<Value> = ctx
        .config
        .methods
        .iter()
        .map(|m| {
            let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.method == m.name()).collect();
            let mean = |f: fn(&BenchRow) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / mine.len().max(1) as f64;
            json!({ "method": m.name(), "pdq": finite(mean(|r| r.pdq)), "map": finite(mean(|r| r.map)) })
        })
        .collect();
    Ok(json!({ "rows": rows.len(), "methods": summary, "bench_file": out }))
}
