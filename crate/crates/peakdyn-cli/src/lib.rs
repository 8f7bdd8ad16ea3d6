//! Batch runner for the peak dynamics experiments.
//!
//! A run reads one TOML config, expands its sweep into independent
//! experiments, runs them on a thread pool and writes each one to
//! `<out>/<kind>/<tag>/`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use config::{ExperimentConfig, ExperimentKind};
use error::CliError;
use output::RunDir;
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "PEAKDYN_OUT";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    kind: &'static str,
    tag: &'a str,
    seed: u64,
    peakdyn_version: &'static str,
    cli_version: &'static str,
    status: &'a str,
    files: &'a [String],
    config: &'a ExperimentConfig,
}

/// Where a finished experiment wrote its files.
#[derive(Debug)]
pub struct RunOutcome {
    pub tag: String,
    pub dir: PathBuf,
    pub result: Result<serde_json::Value, CliError>,
}

fn dispatch(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    match config.kind {
        ExperimentKind::Stationary => experiments::stationary::run(config, dir),
        ExperimentKind::Simulate => experiments::simulate::run(config, dir),
        ExperimentKind::Moments => experiments::moments::run(config, dir),
        ExperimentKind::Linear => experiments::linear::run(config, dir),
        ExperimentKind::Stability => experiments::stability::run(config, dir),
        ExperimentKind::VerifyBounds => experiments::bounds::run(config, dir),
    }
}

/// Runs one experiment into `base/<tag>` and writes its manifest, summary
/// and, on numerical failure, a diagnostic file.
pub fn run_one(config: &ExperimentConfig, base: &Path, tag: &str) -> RunOutcome {
    let name = if tag.is_empty() { "run" } else { tag };
    let mut dir = match RunDir::create(base, name) {
        Ok(d) => d,
        Err(e) => return RunOutcome { tag: tag.to_string(), dir: base.join(name), result: Err(e) },
    };
    let result = dispatch(config, &mut dir);
    let status = match &result {
        Ok(_) => "ok",
        Err(CliError::Config(_)) => "config-error",
        Err(CliError::Hypothesis(_)) => "hypothesis-violation",
        Err(_) => "numerical-failure",
    };
    let finish = |dir: &mut RunDir| -> Result<(), CliError> {
        match &result {
            Ok(summary) => dir.json("summary.json", summary)?,
            Err(e) => dir.text("diagnostic.txt", &format!("{e}\n\nresolved config:\n{}", config.to_toml()))?,
        }
        let files = dir.files.clone();
        let manifest = Manifest {
            kind: config.kind.name(),
            tag: name,
            seed: config.seed,
            peakdyn_version: peakdyn::VERSION,
            cli_version: env!("CARGO_PKG_VERSION"),
            status,
            files: &files,
            config,
        };
        dir.json("manifest.json", &manifest)
    };
    let result = match (finish(&mut dir), result) {
        (Err(e), Ok(_)) => Err(e),
        (_, r) => r,
    };
    RunOutcome { tag: name.to_string(), dir: dir.path, result }
}

/// Expands the sweep and runs every experiment under `out/<kind>/`, using
/// `threads` workers (all cores when `None`).
pub fn run_all(config: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Vec<RunOutcome>, CliError> {
    config.validate()?;
    let runs = config.expand();
    for (_, c) in &runs {
        c.validate()?;
    }
    let base = out.join(config.kind.name());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        builder = builder.num_threads(k);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| runs.par_iter().map(|(tag, c)| run_one(c, &base, tag)).collect()))
}

/// Output directory: `PEAKDYN_OUT` if set, else `flag`, else `out`.
pub fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).or(flag).unwrap_or_else(|| PathBuf::from("out"))
}
