//! Argument parsing and verb dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig, Overrides};
use crate::sweep::{load_manifest, report, sweep_table};
use crate::{exit, run, status_code, threads_from_env, RunError};

#[derive(Debug, Parser)]
#[command(name = "gaplab", version, about = "Seeded reward-gap experiments for toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Run one experiment over its full parameter grid.
    Run(RunArgs),
    /// Pivot the outputs of several runs of one experiment kind.
    Sweep(SweepArgs),
    /// Summarize a run manifest and verify its outputs.
    Report {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long, value_parser = ["ve", "vp"])]
    model: Option<String>,
    /// Comma-separated stochasticity values.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Comma-separated horizons.
    #[arg(long = "T", value_delimiter = ',')]
    horizon: Option<Vec<f64>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_samples: Option<u64>,
    #[arg(long)]
    n_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long, value_parser = ["csv", "json"])]
    format: Option<String>,
    /// Record elapsed seconds in training logs.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    /// Directory for `sweep.csv` and `summary.txt`; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training iterations to keep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Option<Vec<u64>>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            experiment: self.experiment.clone(),
            model: self.model.clone(),
            eta: self.eta.clone(),
            horizon: self.horizon.clone(),
            beta: self.beta,
            n_samples: self.n_samples,
            n_steps: self.n_steps,
            seed: self.seed,
            out: self.out.clone(),
            format: self.format.clone(),
            wall_clock: self.wall_clock,
        }
    }

    fn load(&self) -> Result<ExperimentConfig, RunError> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                RunError::Config(ConfigError::single("--config", format!("{}: {e}", p.display())))
            })?),
            None => None,
        };
        Ok(ExperimentConfig::load(text.as_deref(), &self.overrides())?)
    }
}

fn run_verb(args: &RunArgs, out: &mut dyn Write) -> Result<i32, RunError> {
    let config = args.load()?;
    let threads = threads_from_env()?;
    let manifest = run(&config, threads)?;
    for c in manifest.failed_checks() {
        let _ = writeln!(out, "bound violation: {} {} (value {}, limit {})", c.cell, c.name, c.value, c.limit);
    }
    let _ = writeln!(out, "wrote {}", crate::manifest_path(&config).display());
    Ok(status_code(&manifest))
}

fn sweep_verb(args: &SweepArgs, out: &mut dyn Write) -> Result<i32, RunError> {
    let loaded = args.manifests.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>, _>>()?;
    let table = sweep_table(&loaded, args.checkpoints.as_deref())?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
            let csv_path = dir.join("sweep.csv");
            std::fs::write(&csv_path, table.to_csv()).map_err(|e| RunError::io(&csv_path, e))?;
            let txt = dir.join("summary.txt");
            std::fs::write(&txt, &table.summary).map_err(|e| RunError::io(&txt, e))?;
        }
        None => {
            let _ = out.write_all(&table.to_csv());
        }
    }
    let _ = out.write_all(table.summary.as_bytes());
    let all_pass = loaded.iter().all(|m| m.manifest.failed_checks().next().is_none());
    Ok(if all_pass { exit::SUCCESS } else { exit::BOUND_VIOLATION })
}

fn report_verb(path: &std::path::Path, out: &mut dyn Write) -> Result<i32, RunError> {
    let loaded = load_manifest(path)?;
    let (text, intact) = report(&loaded);
    let _ = out.write_all(text.as_bytes());
    if !intact {
        return Err(RunError::Report("outputs are missing or modified".into()));
    }
    Ok(status_code(&loaded.manifest))
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG_ERROR } else { exit::SUCCESS };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    let result = match &cli.verb {
        Verb::Run(a) => run_verb(a, out),
        Verb::Sweep(a) => sweep_verb(a, out),
        Verb::Report { manifest } => report_verb(manifest, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
