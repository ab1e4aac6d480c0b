//! Seeded experiment runner: configuration, execution, reports and the
//! `gaplab` command line.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod output;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{ConfigError, ExperimentConfig, Format};
use output::{sha256_hex, Durations, OutputEntry, RunManifest, RunStatus};

pub const THREADS_ENV: &str = "GAPLAB_THREADS";

pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const BOUND_VIOLATION: i32 = 1;
    pub const CONFIG_ERROR: i32 = 2;
    pub const RUNTIME_ERROR: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("run failed: {0}")]
    Runtime(#[from] gaplab::Error),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Report(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => exit::CONFIG_ERROR,
            _ => exit::RUNTIME_ERROR,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Worker cap from `GAPLAB_THREADS`; `None` when unset or unparsable.
pub fn threads_from_env() -> Result<Option<usize>, ConfigError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError::single(THREADS_ENV, format!("{v:?} is not a positive integer"))),
        },
    }
}

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

pub fn manifest_path(config: &ExperimentConfig) -> PathBuf {
    config.out.join(format!("{}{MANIFEST_SUFFIX}", config.experiment.id()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, bytes).map_err(|e| RunError::io(path, e))
}

/// Executes the experiment, writes data files, charts and the manifest into
/// `config.out`, and returns the manifest.
pub fn run(config: &ExperimentConfig, threads: Option<usize>) -> Result<RunManifest, RunError> {
    config.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Report(format!("cannot start worker pool: {e}")))?;
    let outcome = pool.install(|| experiments::execute(config))?;
    std::fs::create_dir_all(&config.out).map_err(|e| RunError::io(&config.out, e))?;
    let mut outputs = Vec::new();
    for table in &outcome.tables {
        let (ext, bytes) = match config.format {
            Format::Csv => ("csv", table.to_csv()),
            Format::Json => ("json", table.to_json()),
        };
        let name = format!("{}.{ext}", table.name);
        write(&config.out.join(&name), &bytes)?;
        outputs.push(OutputEntry {
            path: name,
            sha256: sha256_hex(&bytes),
            cell: table.cell.clone(),
        });
    }
    for chart in &outcome.charts {
        let svg = chart.to_svg();
        let name = format!("{}.svg", chart.name);
        write(&config.out.join(&name), svg.as_bytes())?;
        outputs.push(OutputEntry {
            path: name,
            sha256: sha256_hex(svg.as_bytes()),
            cell: None,
        });
    }
    let status = if outcome.checks.iter().all(|c| c.pass) {
        RunStatus::Pass
    } else {
        RunStatus::BoundViolation
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: config.experiment,
        config_hash: sha256_hex(config.canonical_json().as_bytes()),
        config: config.clone(),
        outputs,
        durations: Durations {
            total_seconds: start.elapsed().as_secs_f64(),
            cells: outcome.durations,
        },
        checks: outcome.checks,
        status,
    };
    write(&manifest_path(config), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

pub fn status_code(manifest: &RunManifest) -> i32 {
    match manifest.status {
        RunStatus::Pass => exit::SUCCESS,
        RunStatus::BoundViolation => exit::BOUND_VIOLATION,
    }
}
