//! Command-line front end: configuration, file formats and subcommands.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use d2t_core::experiment::Method;
use d2t_core::parallel::Execution;
use d2t_core::{Error, Result};
use serde_json::Value;

use commands::Context;
use config::RunConfig;

pub const THREADS_ENV: &str = "BAYES_D2T_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bayes-d2t", version, about = "Bayesian detect-to-track: simulate, track, train, evaluate")]
pub struct Cli {
    /// TOML config with flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub particles: Option<usize>,
    /// pf, single, frame-bayes, greedy, greedy-offset or kalman.
    #[arg(long, global = true)]
    pub method: Option<Method>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scene into `--out DIR` (frames.jsonl, truth.jsonl).
    Simulate,
    /// Track a frames file into the `--out` track file.
    Track {
        frames: PathBuf,
        /// Motion parameters from `train`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train motion parameters on a simulated dataset directory.
    Train { dataset: PathBuf },
    /// Score a track file against a truth file into the `--out` CSV.
    Eval { tracks: PathBuf, truth: PathBuf },
    /// Score every method on simulated scenes into the `--out` CSV.
    Bench,
}

/// Threads requested by the environment (0 = rayon default).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a non-negative integer"))),
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(n) = cli.particles {
        overrides.push(format!("filter.particles={n}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

pub fn run(cli: &Cli) -> Result<Value> {
    let ctx = Context {
        config: load_config(cli)?,
        execution: Execution::default(),
        force: cli.force,
    };
    let out = || cli.out.clone().ok_or_else(|| Error::Config("--out is required".into()));
    match &cli.command {
        Command::Simulate => commands::cmd_simulate(&ctx, &out()?),
        Command::Track { frames, params } => commands::cmd_track(&ctx, frames, cli.method.unwrap_or(Method::ParticleFilter), params.as_deref(), &out()?),
        Command::Train { dataset } => commands::cmd_train(&ctx, dataset, &out()?),
        Command::Eval { tracks, truth } => {
            let label = cli.method.map_or("pred", Method::name);
            commands::cmd_eval(&ctx, tracks, truth, label, &out()?)
        }
        Command::Bench => {
            let mut ctx = ctx;
            if let Some(m) = cli.method {
                ctx.config.methods = vec![m];
            }
            commands::cmd_bench(&ctx, &out()?)
        }
    }
}

/// Machine-readable error record.
pub fn error_record(kind: &str, message: &str) -> Value {
    serde_json::json!({ "error": kind, "message": message })
}
