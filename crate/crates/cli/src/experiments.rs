//! One function per experiment kind. Each parameter cell is computed
//! independently; results are assembled in configuration order.

use std::time::Instant;

use gaplab::diffusion::{DiffusionModel, ModelKind, ScoreModel};
use gaplab::finetune::{self, FinetuneSpec};
use gaplab::gap::{self, MixtureGapConfig, W2CheckConfig};
use gaplab::laws::MixtureLaw;
use gaplab::rlhf::{self, PolicySpec, Reward, TrainLog};
use gaplab::samplers::{
    build_alpha_schedule, gddim_sample, integrate_ode, integrate_sde, OdeMethod, ScheduleKind, TimeGrid,
    TrajectoryBatch,
};
use gaplab::stats::mean_var;
use gaplab::Result;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind, ModelChoice, ScheduleChoice};
use crate::output::{
    format_float, Cell, CellDuration, Chart, Check, Series, Table, GAP_HEADER, MARGINAL_HEADER, TRAINING_HEADER,
    W2_HEADER,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub charts: Vec<Chart>,
    pub checks: Vec<Check>,
    pub durations: Vec<CellDuration>,
}

struct CellResult {
    rows: Vec<Vec<Cell>>,
    checks: Vec<Check>,
    log: Option<TrainLog>,
}

fn kind_of(m: ModelChoice) -> ModelKind {
    match m {
        ModelChoice::Ve => ModelKind::Ve,
        ModelChoice::Vp => ModelKind::Vp,
    }
}

fn model_for(kind: ModelKind, horizon: f64, dim: usize) -> Result<DiffusionModel> {
    match kind {
        ModelKind::Vp => DiffusionModel::vp(horizon, dim),
        _ => DiffusionModel::ve(horizon, dim),
    }
}

pub fn cell_label(eta: f64, horizon: f64) -> String {
    format!("eta={},T={}", format_float(eta), format_float(horizon))
}

/// Runs every cell of the configuration.
pub fn execute(config: &ExperimentConfig) -> Result<Outcome> {
    let cells: Vec<(f64, f64)> = config
        .eta
        .iter()
        .flat_map(|&e| config.horizon.iter().map(move |&t| (e, t)))
        .collect();
    let results: Vec<Result<(CellResult, f64)>> = cells
        .par_iter()
        .map(|&(eta, t)| {
            let start = Instant::now();
            let r = run_cell(config, eta, t)?;
            Ok((r, start.elapsed().as_secs_f64()))
        })
        .collect();
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        done.push(r?);
    }
    Ok(assemble(config, &cells, done))
}

fn run_cell(config: &ExperimentConfig, eta: f64, t: f64) -> Result<CellResult> {
    match config.experiment {
        ExperimentKind::VeGap => gap_cell(config, ModelKind::Ve, eta, t),
        ExperimentKind::VpGap => gap_cell(config, ModelKind::Vp, eta, t),
        ExperimentKind::MixtureGap => mixture_cell(config, eta, t),
        ExperimentKind::MarginalCheck => marginal_cell(config, eta, t),
        ExperimentKind::GddimCheck => gddim_cell(config, eta, t),
        ExperimentKind::W2Bound => w2_cell(config, eta, t),
        ExperimentKind::DdpoTrain => training_cell(config, eta, t, false),
        ExperimentKind::GrpoTrain => training_cell(config, eta, t, true),
    }
}

fn assemble(config: &ExperimentConfig, cells: &[(f64, f64)], done: Vec<(CellResult, f64)>) -> Outcome {
    let kind = config.experiment;
    let mut checks = Vec::new();
    let mut durations = Vec::new();
    let mut tables = Vec::new();
    let mut charts = Vec::new();
    let header: &[&'static str] = match kind {
        ExperimentKind::VeGap | ExperimentKind::VpGap | ExperimentKind::MixtureGap => &GAP_HEADER,
        ExperimentKind::MarginalCheck | ExperimentKind::GddimCheck => &MARGINAL_HEADER,
        ExperimentKind::W2Bound => &W2_HEADER,
        ExperimentKind::DdpoTrain | ExperimentKind::GrpoTrain => &TRAINING_HEADER,
    };
    let mut single = Table::new(kind.id(), header);
    let mut series: Vec<Series> = Vec::new();
    for (&(eta, t), (result, secs)) in cells.iter().zip(done) {
        let label = cell_label(eta, t);
        durations.push(CellDuration {
            cell: label.clone(),
            seconds: secs,
        });
        checks.extend(result.checks);
        if kind.is_training() {
            let log = result.log.expect("training cells carry a log");
            series.push(Series {
                label: label.clone(),
                points: log.rows.iter().map(|r| (r.iter as f64, r.gap)).collect(),
            });
            let mut table = Table::new(
                format!("{}_eta{}_T{}", kind.id(), format_float(eta), format_float(t)),
                header,
            );
            table.cell = Some(label);
            table.rows = result.rows;
            tables.push(table);
        } else {
            single.rows.extend(result.rows);
        }
    }
    if matches!(kind, ExperimentKind::VeGap | ExperimentKind::VpGap | ExperimentKind::MixtureGap) {
        for &eta in &config.eta {
            let points = single
                .rows
                .iter()
                .filter(|r| r[1] == Cell::Float(eta))
                .filter_map(|r| match (&r[2], &r[9]) {
                    (Cell::Float(t), Cell::Float(d)) => Some((*t, *d)),
                    _ => None,
                })
                .collect();
            series.push(Series {
                label: format!("eta={}", format_float(eta)),
                points,
            });
        }
        charts.push(Chart {
            name: kind.id().into(),
            title: format!("{}: Monte Carlo reward gap", kind.id()),
            x_label: "T".into(),
            y_label: "|J_ODE - J_SDE|".into(),
            series,
        });
    } else if kind.is_training() {
        charts.push(Chart {
            name: kind.id().into(),
            title: format!("{}: closed-form reward gap along training", kind.id()),
            x_label: "iteration".into(),
            y_label: "|J_SDE - J_ODE|".into(),
            series,
        });
    }
    if !kind.is_training() {
        tables.push(single);
    }
    Outcome {
        tables,
        charts,
        checks,
        durations,
    }
}

fn gap_cell(config: &ExperimentConfig, kind: ModelKind, eta: f64, t: f64) -> Result<CellResult> {
    let label = cell_label(eta, t);
    let spec = FinetuneSpec::new(model_for(kind, t, 1)?, eta, config.beta, vec![1.0])?;
    let analytic = gap::analytic_gap(&spec)?;
    let theta = analytic.params.theta.clone();
    let grid = TimeGrid::uniform(t, config.n_steps)?;
    let base = ScoreModel::standard_gaussian(1);
    let tuned = base.with_control(Some(spec.control(theta.clone())))?;
    let (n, seed) = (config.n_samples, config.seed);
    let reference = integrate_sde(&spec.model, &base, eta, &grid, n, seed, false)?;
    let sde = integrate_sde(&spec.model, &tuned, eta, &grid, n, seed, false)?;
    let ode = integrate_ode(&spec.model, &tuned, &grid, n, seed, false, OdeMethod::Rk4)?;
    let mc = gap::mc_gap(&reference, &sde, &ode, &spec.anchor)?;
    let mut checks = vec![
        Check::at_most(&label, "delta_bound", analytic.delta, analytic.bound + analytic.slack),
        Check::at_least(&label, "improvement_floor", analytic.improvement, analytic.improvement_floor()),
        Check::at_most(&label, "chain_bound", analytic.delta, analytic.chain_bound.unwrap_or(f64::NAN)),
        Check::at_most(&label, "mc_consistency", (mc.delta - analytic.delta).abs(), 3.0 * mc.se_delta),
    ];
    if kind == ModelKind::Vp {
        checks.push(Check::at_most(&label, "mc_zero", mc.delta, 3.0 * mc.se_delta));
    }
    let pass = checks.iter().all(|c| c.pass);
    let row = vec![
        Cell::Text(kind.id().into()),
        Cell::Float(eta),
        Cell::Float(t),
        Cell::Float(config.beta),
        Cell::Float(theta[0]),
        Cell::Float(mc.j_ref),
        Cell::Float(mc.j_sde),
        Cell::Float(mc.j_ode),
        Cell::Float(analytic.delta),
        Cell::Float(mc.delta),
        Cell::Float(mc.se_delta),
        Cell::Float(mc.improvement),
        Cell::Float(analytic.bound),
        Cell::Bool(pass),
    ];
    Ok(CellResult {
        rows: vec![row],
        checks,
        log: None,
    })
}

fn mixture_cell(config: &ExperimentConfig, eta: f64, t: f64) -> Result<CellResult> {
    let label = cell_label(eta, t);
    let m = &config.mixture;
    let prior = MixtureLaw::isotropic(m.weights.clone(), &m.means, &vec![1.0; m.means.len()])?;
    let kind = kind_of(config.model_or(ModelChoice::Ve));
    let mc = gap::mixture_gap_experiment(
        &prior,
        &m.anchor,
        &MixtureGapConfig {
            kind,
            eta,
            beta: config.beta,
            horizon: t,
            n: config.n_samples,
            n_steps: config.n_steps,
            seed: config.seed,
        },
    )?;
    let norm2: f64 = m.anchor.iter().map(|r| r * r).sum();
    let along = mc.params.theta.iter().zip(&m.anchor).map(|(a, r)| a * r).sum::<f64>() / norm2;
    let check = Check::at_most(&label, "mixture_bound", mc.delta, mc.bound + 3.0 * mc.se_delta);
    let row = vec![
        Cell::Text(kind.id().into()),
        Cell::Float(eta),
        Cell::Float(t),
        Cell::Float(config.beta),
        Cell::Float(along),
        Cell::Float(mc.j_ref),
        Cell::Float(mc.j_sde),
        Cell::Float(mc.j_ode),
        Cell::Empty,
        Cell::Float(mc.delta),
        Cell::Float(mc.se_delta),
        Cell::Float(mc.improvement),
        Cell::Float(mc.bound),
        Cell::Bool(check.pass),
    ];
    Ok(CellResult {
        rows: vec![row],
        checks: vec![check],
        log: None,
    })
}

/// Row and checks comparing a terminal batch with a Gaussian target.
fn marginal_row(label: &str, eta: f64, batch: &TrajectoryBatch, mean_target: f64, var_target: f64) -> CellResult {
    let xs = batch.column(0);
    let n = xs.len() as f64;
    let (mean, var) = mean_var(&xs);
    let se_mean = (var / n).sqrt();
    let checks = vec![
        Check::at_most(label, "mean", (mean - mean_target).abs(), 3.0 * (var_target / n).sqrt()),
        Check::at_most(label, "variance", (var - var_target).abs(), 3.0 * 2f64.sqrt() * var_target / n.sqrt()),
    ];
    let pass = checks.iter().all(|c| c.pass);
    CellResult {
        rows: vec![vec![
            Cell::Float(eta),
            Cell::Int(xs.len() as u64),
            Cell::Float(mean),
            Cell::Float(se_mean),
            Cell::Float(var),
            Cell::Float(var_target),
            Cell::Bool(pass),
        ]],
        checks,
        log: None,
    }
}

fn marginal_cell(config: &ExperimentConfig, eta: f64, t: f64) -> Result<CellResult> {
    let kind = kind_of(config.model_or(ModelChoice::Vp));
    let model = model_for(kind, t, 1)?;
    let grid = TimeGrid::uniform(t, config.n_steps)?;
    let batch = integrate_sde(&model, &ScoreModel::standard_gaussian(1), eta, &grid, config.n_samples, config.seed, false)?;
    let target = finetune::terminal_law(kind, &[0.0], eta, t)?;
    Ok(marginal_row(&cell_label(eta, t), eta, &batch, target.mean_scalar(), target.variance_scalar()))
}

fn gddim_cell(config: &ExperimentConfig, eta: f64, t: f64) -> Result<CellResult> {
    let grid = TimeGrid::uniform(t, config.n_steps)?;
    let kind = match config.gddim.schedule {
        ScheduleChoice::Cosine => ScheduleKind::Cosine,
        ScheduleChoice::VpQuadratic => ScheduleKind::VpQuadratic,
    };
    let schedule = build_alpha_schedule(&kind, &grid)?;
    let batch = gddim_sample(&schedule, &ScoreModel::standard_gaussian(1), eta, config.n_samples, config.seed)?;
    Ok(marginal_row(&cell_label(eta, t), eta, &batch, 0.0, 1.0))
}

fn w2_cell(config: &ExperimentConfig, eta: f64, t: f64) -> Result<CellResult> {
    let w = &config.w2;
    let cell = gap::w2_check(&W2CheckConfig {
        m: w.m,
        l: w.l,
        g0: w.g0,
        eta,
        horizon: t,
        n: config.n_samples,
        n_steps: config.n_steps,
        seed: config.seed,
    })?;
    let label = cell_label(eta, t);
    Ok(CellResult {
        rows: vec![vec![
            Cell::Float(eta),
            Cell::Float(t),
            Cell::Float(cell.kappa),
            Cell::Float(cell.a_hat),
            Cell::Float(cell.coupled_l2),
            Cell::Float(cell.w2_1d),
            Cell::Float(cell.bound),
            Cell::Bool(cell.pass),
        ]],
        checks: vec![Check::at_most(&label, "w2_bound", cell.coupled_l2, cell.bound)],
        log: None,
    })
}

fn training_cell(config: &ExperimentConfig, eta: f64, t: f64, grpo: bool) -> Result<CellResult> {
    let label = cell_label(eta, t);
    let section = &config.training;
    let kind = kind_of(config.model_or(ModelChoice::Ve));
    let grid = TimeGrid::uniform(t, section.n_steps.unwrap_or(config.n_steps))?;
    let policy = PolicySpec::canonical(model_for(kind, t, 1)?, vec![section.theta0], eta, grid)?;
    let reward = Reward::Quadratic(vec![1.0]);
    let beta = if grpo { 0.0 } else { config.beta };
    let train = section.train_config(config.seed, (!grpo).then_some(beta), grpo);
    let log = if grpo {
        rlhf::grpo_train(&policy, &train, &reward)?
    } else {
        rlhf::ddpo_train(&policy, &train, &reward)?
    };
    let spec = FinetuneSpec::new(model_for(kind, t, 1)?, eta, beta, vec![1.0])?;
    let star = finetune::optimal_theta_for(&spec)?;
    let mut checks = Vec::new();
    if grpo {
        checks.push(Check::at_most(&label, "theta_error", (log.theta[0] - star).abs(), section.grpo_tolerance));
        checks.push(Check::at_most(&label, "advantage_mean", log.max_advantage_mean_error, 1e-12));
        checks.push(Check::at_most(&label, "advantage_std", log.max_advantage_std_error, 1e-12));
        checks.push(Check::flag(
            &label,
            "smoothed_reward_non_decreasing",
            rlhf::smoothed_non_decreasing(&log.rows, section.smoothing_window, 3.0),
        ));
    } else {
        checks.push(Check::at_most(&label, "theta_error", (log.theta[0] - star).abs(), section.tolerance));
        let (first, last) = (log.rows[0].gap, log.rows[log.rows.len() - 1].gap);
        checks.push(Check {
            cell: label.clone(),
            name: "gap_decreases".into(),
            value: last,
            limit: first,
            pass: last < first,
        });
    }
    let rows = log
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Int(r.iter as u64),
                Cell::Text(r.theta.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(";")),
                Cell::Float(r.j_sde),
                Cell::Float(r.j_ode),
                Cell::Float(r.gap),
                Cell::Float(r.grad_norm),
                Cell::Float(if config.wall_clock { r.seconds } else { 0.0 }),
            ]
        })
        .collect();
    Ok(CellResult {
        rows,
        checks,
        log: Some(log),
    })
}
