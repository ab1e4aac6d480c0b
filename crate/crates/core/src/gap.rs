//! Improvement and reward-gap measurements, Wasserstein-2 estimators and the
//! bounds they are checked against.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Control, DiffusionModel, LinearCoefficients, ModelKind, ScoreBase, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::finetune::{self, FinetuneSpec};
use crate::laws::{GaussianLaw, MixtureLaw};
use crate::samplers::{integrate_ode, integrate_sde, OdeMethod, TimeGrid, TrajectoryBatch};
use crate::stats::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapParams {
    pub model: String,
    pub eta: f64,
    pub beta: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub theta: Vec<f64>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub j_ref: f64,
    pub j_sde: f64,
    pub j_ode: f64,
    pub se_ref: f64,
    pub se_sde: f64,
    pub se_ode: f64,
    /// `|J_ODE - J_SDE|`.
    pub delta: f64,
    /// `J_ODE - J_SDE`.
    pub signed_gap: f64,
    pub se_delta: f64,
    /// `J_ODE - J_REF`.
    pub improvement: f64,
    pub se_improvement: f64,
    /// Leading-order bound: `1/(2T)` for VE, `e^{-T^2}/2` for VP.
    pub bound: f64,
    /// Finite-horizon allowance added to `bound`.
    pub slack: f64,
    /// Non-asymptotic bound valid at every horizon, when known.
    pub chain_bound: Option<f64>,
    pub bound_satisfied: bool,
    pub method: GapMethod,
    pub params: GapParams,
}

impl GapReport {
    pub fn improvement_floor(&self) -> f64 {
        1.0 - self.bound - self.slack
    }
}

/// `(leading bound, slack)` for a model family at horizon `T`.
pub fn horizon_bound(kind: ModelKind, horizon: f64) -> Result<(f64, f64)> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::DegenerateHorizon);
    }
    match kind {
        ModelKind::Ve => Ok((0.5 / horizon, 1.0 / (horizon * horizon))),
        ModelKind::Vp => {
            let t2 = horizon * horizon;
            Ok((0.5 * (-t2).exp(), (-2.0 * t2).exp()))
        }
        ModelKind::GenericLinear => Err(Error::InvalidArgument(
            "reward-gap bounds are stated for VE and VP only".into(),
        )),
    }
}

/// Exact bound on `|J_ODE - J_SDE|` at the optimum, valid at every horizon.
///
/// With `b = (1 + beta/2)^{-1}` and `a = ||anchor||^2`:
/// VE: `d / Tb + a (b^2 / Tb + 2 b (1 - b) / sqrt(Tb))`, `Tb = 1 + T^2`;
/// VP: `a u (2 (1 - b) + u)` with `u = b e^{-T^2/2} / (1 - e^{-T^2/2})`.
pub fn chain_bound(kind: ModelKind, beta: f64, horizon: f64, anchor: &[f64]) -> Result<f64> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::DegenerateHorizon);
    }
    let b = 1.0 / (1.0 + 0.5 * beta);
    let a: f64 = anchor.iter().map(|r| r * r).sum();
    match kind {
        ModelKind::Ve => {
            let tb = 1.0 + horizon * horizon;
            Ok(anchor.len() as f64 / tb + a * (b * b / tb + 2.0 * b * (1.0 - b) / tb.sqrt()))
        }
        ModelKind::Vp => {
            let e = (-0.5 * horizon * horizon).exp();
            let u = b * e / (1.0 - e);
            Ok(a * u * (2.0 * (1.0 - b) + u))
        }
        ModelKind::GenericLinear => Err(Error::InvalidArgument(
            "reward-gap bounds are stated for VE and VP only".into(),
        )),
    }
}

/// Closed-form gap at the optimal control of `spec`.
pub fn analytic_gap(spec: &FinetuneSpec) -> Result<GapReport> {
    let theta = finetune::optimal_control(spec)?;
    analytic_gap_at(spec, &theta)
}

/// Closed-form gap at an arbitrary control.
pub fn analytic_gap_at(spec: &FinetuneSpec, theta: &[f64]) -> Result<GapReport> {
    let triple = finetune::process_triple(spec, theta)?;
    let j_ref = finetune::reward_expectation(&triple.ref_law, &spec.anchor)?;
    let j_sde = finetune::reward_expectation(&triple.sde_law, &spec.anchor)?;
    let j_ode = finetune::reward_expectation(&triple.ode_law, &spec.anchor)?;
    let (bound, slack) = horizon_bound(spec.kind(), spec.horizon())?;
    let delta = (j_ode - j_sde).abs();
    Ok(GapReport {
        j_ref,
        j_sde,
        j_ode,
        se_ref: 0.0,
        se_sde: 0.0,
        se_ode: 0.0,
        delta,
        signed_gap: j_ode - j_sde,
        se_delta: 0.0,
        improvement: j_ode - j_ref,
        se_improvement: 0.0,
        bound,
        slack,
        chain_bound: Some(chain_bound(spec.kind(), spec.beta, spec.horizon(), &spec.anchor)?),
        bound_satisfied: delta <= bound + slack,
        method: GapMethod::Analytic,
        params: GapParams {
            model: spec.kind().id().into(),
            eta: spec.eta,
            beta: Some(spec.beta),
            horizon: spec.horizon(),
            theta: theta.to_vec(),
            n: None,
        },
    })
}

fn rewards(batch: &TrajectoryBatch, anchor: &[f64]) -> Vec<f64> {
    batch.samples().map(|x| finetune::quadratic_reward(x, anchor)).collect()
}

/// Same seed, size and grid: trajectory `i` of both batches starts from the same draw.
fn coupled(a: &TrajectoryBatch, b: &TrajectoryBatch) -> bool {
    a.meta().seed == b.meta().seed
        && a.n() == b.n()
        && a.meta().grid == b.meta().grid
        && a.meta().model == b.meta().model
}

/// Standard error of `mean(b) - mean(a)`, paired when the batches are coupled.
fn difference_se(a: &TrajectoryBatch, ra: &[f64], b: &TrajectoryBatch, rb: &[f64]) -> f64 {
    if coupled(a, b) {
        let diff: Vec<f64> = rb.iter().zip(ra).map(|(y, x)| y - x).collect();
        mean_se(&diff).1
    } else {
        let (sa, sb) = (mean_se(ra).1, mean_se(rb).1);
        (sa * sa + sb * sb).sqrt()
    }
}

/// Plug-in estimate of the gap from three terminal batches. With coupled
/// batches the standard errors of differences are computed pairwise.
/// `bound_satisfied` allows three standard errors of `delta`.
pub fn mc_gap(
    reference: &TrajectoryBatch,
    sde: &TrajectoryBatch,
    ode: &TrajectoryBatch,
    anchor: &[f64],
) -> Result<GapReport> {
    check_dim(reference.dim(), sde.dim())?;
    check_dim(reference.dim(), ode.dim())?;
    check_dim(reference.dim(), anchor.len())?;
    let (rr, rs, ro) = (rewards(reference, anchor), rewards(sde, anchor), rewards(ode, anchor));
    let ((j_ref, se_ref), (j_sde, se_sde), (j_ode, se_ode)) = (mean_se(&rr), mean_se(&rs), mean_se(&ro));
    let se_delta = difference_se(sde, &rs, ode, &ro);
    let se_improvement = difference_se(reference, &rr, ode, &ro);
    let horizon = sde.meta().grid.horizon();
    let kind = match sde.meta().model.as_str() {
        "ve" => Some(ModelKind::Ve),
        "vp" => Some(ModelKind::Vp),
        _ => None,
    };
    let (bound, slack) = match kind {
        Some(k) => horizon_bound(k, horizon)?,
        None => (f64::NAN, 0.0),
    };
    let delta = (j_ode - j_sde).abs();
    Ok(GapReport {
        j_ref,
        j_sde,
        j_ode,
        se_ref,
        se_sde,
        se_ode,
        delta,
        signed_gap: j_ode - j_sde,
        se_delta,
        improvement: j_ode - j_ref,
        se_improvement,
        bound,
        slack,
        chain_bound: None,
        bound_satisfied: delta <= bound + slack + 3.0 * se_delta,
        method: GapMethod::MonteCarlo,
        params: GapParams {
            model: sde.meta().model.clone(),
            eta: sde.meta().eta,
            beta: None,
            horizon,
            theta: Vec::new(),
            n: Some(sde.n()),
        },
    })
}

/// Exact `W2` between two empirical laws on the line, through the quantile
/// coupling. Unequal sizes are matched on the merged quantile breakpoints.
pub fn w2_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    if samples_a.iter().chain(samples_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    let sorted = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(samples_a), sorted(samples_b));
    if a.len() == b.len() {
        let ss: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((ss / a.len() as f64).sqrt());
    }
    let (na, nb) = (a.len() as u128, b.len() as u128);
    // Breakpoints i/na and j/nb compared exactly as i*nb vs j*na.
    let (mut i, mut j) = (0u128, 0u128);
    let (mut prev, mut acc) = (0.0f64, 0.0f64);
    while i < na && j < nb {
        let (ea, eb) = ((i + 1) * nb, (j + 1) * na);
        let next = ea.min(eb) as f64 / (na * nb) as f64;
        let d = a[i as usize] - b[j as usize];
        acc += (next - prev) * d * d;
        prev = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(acc.sqrt())
}

/// Root-mean-square terminal displacement of synchronously coupled batches.
pub fn coupled_l2(sde: &TrajectoryBatch, ode: &TrajectoryBatch) -> Result<f64> {
    check_dim(sde.dim(), ode.dim())?;
    if sde.meta().seed != ode.meta().seed {
        return Err(Error::UncoupledBatches(format!(
            "seeds {} and {} differ",
            sde.meta().seed,
            ode.meta().seed
        )));
    }
    if sde.n() != ode.n() {
        return Err(Error::UncoupledBatches(format!("sizes {} and {} differ", sde.n(), ode.n())));
    }
    if sde.meta().grid != ode.meta().grid {
        return Err(Error::UncoupledBatches("grids differ".into()));
    }
    let ss: f64 = sde.terminal().iter().zip(ode.terminal()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / sde.n() as f64).sqrt())
}

/// Constants of the dissipativity setting. `kappa` is the margin
/// `2m - (L + eta^2/4) g_inf^2`, which must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Assumptions {
    pub m: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub g_inf: f64,
    pub eta: f64,
    pub kappa: f64,
    #[serde(rename = "C")]
    pub c: Option<f64>,
}

impl W2Assumptions {
    pub fn new(m: f64, l: f64, a: f64, g_inf: f64, eta: f64, c: Option<f64>) -> Self {
        let kappa = 2.0 * m - (l + 0.25 * eta * eta) * g_inf * g_inf;
        Self {
            m,
            l,
            a,
            g_inf,
            eta,
            kappa,
            c,
        }
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self::new(self.m, self.l, self.a, self.g_inf, eta, self.c)
    }
}

/// `eta g_inf sqrt((L^2 A + 1)(1 - e^{-kappa T}) / kappa)`.
pub fn w2_bound(assumptions: &W2Assumptions, horizon: f64) -> Result<f64> {
    let w = assumptions;
    if !(w.kappa > 0.0) {
        return Err(Error::BoundInapplicable(w.kappa));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::DegenerateHorizon);
    }
    if !(w.a >= 0.0 && w.g_inf >= 0.0 && w.eta >= 0.0 && w.l.is_finite()) {
        return Err(Error::InvalidArgument("assumption constants must be nonnegative".into()));
    }
    let growth = -(-w.kappa * horizon).exp_m1();
    Ok(w.eta * w.g_inf * ((w.l * w.l * w.a + 1.0) * growth / w.kappa).sqrt())
}

/// Reward-gap bound `C * w2_bound` for a `C`-Lipschitz reward.
pub fn reward_gap_bound(assumptions: &W2Assumptions, horizon: f64) -> Result<f64> {
    let c = assumptions
        .c
        .ok_or_else(|| Error::InvalidArgument("reward Lipschitz constant is missing".into()))?;
    Ok(c * w2_bound(assumptions, horizon)?)
}

pub type DriftFn<'a> = &'a dyn Fn(f64, &[f64], &mut [f64]);

/// Empirical constants from sampled states: `m` is the smallest and `L` the
/// largest difference quotient over pairs of states at each grid time; `A` is
/// the largest batch second moment along the paths (terminal only if the
/// batch has no paths). Estimates, not certificates.
pub fn estimate_assumptions(
    f: DriftFn<'_>,
    score: &ScoreModel,
    model: &DiffusionModel,
    sde: &TrajectoryBatch,
) -> Result<W2Assumptions> {
    const MAX_TIMES: usize = 64;
    const MAX_PAIRS: usize = 512;
    let d = sde.dim();
    check_dim(model.dim(), d)?;
    let grid = &sde.meta().grid;
    let horizon = grid.horizon();
    let nodes = grid.nodes();
    let steps = grid.n_steps();
    let ks: Vec<usize> = if sde.has_paths() {
        let stride = steps.div_ceil(MAX_TIMES).max(1);
        let mut ks: Vec<usize> = (0..=steps).step_by(stride).collect();
        if *ks.last().expect("nonempty") != steps {
            ks.push(steps);
        }
        ks
    } else {
        vec![steps]
    };
    let state = |i: usize, k: usize| -> &[f64] {
        if sde.has_paths() {
            sde.state(i, k).expect("paths kept")
        } else {
            sde.sample(i)
        }
    };
    let (mut m_hat, mut l_hat, mut a_hat) = (f64::INFINITY, 0.0f64, 0.0f64);
    let (mut fx, mut fy, mut sx, mut sy) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let pairs = (sde.n() / 2).min(MAX_PAIRS);
    for &k in &ks {
        let tau = horizon - nodes[k];
        let second = (0..sde.n())
            .map(|i| state(i, k).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / sde.n() as f64;
        a_hat = a_hat.max(second);
        for p in 0..pairs {
            let (x, y) = (state(2 * p, k), state(2 * p + 1, k));
            let dist2: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            if dist2 == 0.0 {
                continue;
            }
            f(tau, x, &mut fx);
            f(tau, y, &mut fy);
            score.eval(model, tau, x, &mut sx)?;
            score.eval(model, tau, y, &mut sy)?;
            let inner: f64 = (0..d).map(|j| (fx[j] - fy[j]) * (x[j] - y[j])).sum();
            m_hat = m_hat.min(-inner / dist2);
            let ds2: f64 = (0..d).map(|j| (sx[j] - sy[j]) * (sx[j] - sy[j])).sum();
            l_hat = l_hat.max((ds2 / dist2).sqrt());
        }
    }
    if !m_hat.is_finite() {
        return Err(Error::InvalidArgument("no distinct state pairs to estimate from".into()));
    }
    let g_inf = nodes
        .iter()
        .map(|t| model.diffusion(horizon - t))
        .fold(0.0f64, f64::max);
    Ok(W2Assumptions::new(m_hat, l_hat, a_hat, g_inf, sde.meta().eta, None))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureGapConfig {
    pub kind: ModelKind,
    pub eta: f64,
    pub beta: f64,
    pub horizon: f64,
    pub n: usize,
    pub n_steps: usize,
    pub seed: u64,
}

const GATE_TOL: f64 = 1e-12;

fn check_mixture_preconditions(prior: &MixtureLaw, anchor: &[f64]) -> Result<()> {
    let fail = |m: String| Err(Error::MixturePrecondition(m));
    check_dim(prior.dim(), anchor.len())?;
    let norm2: f64 = anchor.iter().map(|r| r * r).sum();
    if !(norm2 > 0.0) {
        return fail("the reward anchor must be nonzero".into());
    }
    for (i, c) in prior.components().iter().enumerate() {
        let dot: f64 = c.mean().iter().zip(anchor).map(|(m, r)| m * r).sum();
        if dot.abs() > GATE_TOL {
            return fail(format!("component {i} mean is not orthogonal to the anchor ({dot:e})"));
        }
        let id = nalgebra::DMatrix::<f64>::identity(c.dim(), c.dim());
        if (c.covariance() - id).amax() > GATE_TOL {
            return fail(format!("component {i} covariance is not the identity"));
        }
    }
    let centre = prior.mean();
    if centre.amax() > GATE_TOL {
        return fail("weighted component means do not cancel".into());
    }
    Ok(())
}

/// Monte Carlo gap for a mixture prior whose means are orthogonal to the
/// anchor. The control acts along the anchor with the scalar optimum of the
/// matching one-dimensional problem; REF, SDE and ODE batches share the seed.
pub fn mixture_gap_experiment(prior: &MixtureLaw, anchor: &[f64], config: &MixtureGapConfig) -> Result<GapReport> {
    check_mixture_preconditions(prior, anchor)?;
    let d = prior.dim();
    let model = match config.kind {
        ModelKind::Ve => DiffusionModel::ve(config.horizon, d)?,
        ModelKind::Vp => DiffusionModel::vp(config.horizon, d)?,
        ModelKind::GenericLinear => {
            return Err(Error::MixturePrecondition("needs a VE or VP model".into()));
        }
    };
    let norm2: f64 = anchor.iter().map(|r| r * r).sum();
    let scalar = FinetuneSpec::new(
        match config.kind {
            ModelKind::Ve => DiffusionModel::ve(config.horizon, 1)?,
            _ => DiffusionModel::vp(config.horizon, 1)?,
        },
        config.eta,
        config.beta,
        vec![norm2.sqrt()],
    )?;
    let t_star = finetune::optimal_control(&scalar)?[0] / norm2.sqrt();
    let theta: Vec<f64> = anchor.iter().map(|r| t_star * r).collect();
    let control = match config.kind {
        ModelKind::Vp => Control::DecayedShift(theta.clone()),
        _ => Control::ConstantShift(theta.clone()),
    };
    let base = ScoreModel::exact(ScoreBase::ExactMixture(prior.clone()))?;
    let tuned = base.with_control(Some(control))?;
    let grid = TimeGrid::uniform(config.horizon, config.n_steps)?;
    let (n, seed) = (config.n, config.seed);
    let reference = integrate_sde(&model, &base, config.eta, &grid, n, seed, false)?;
    let sde = integrate_sde(&model, &tuned, config.eta, &grid, n, seed, false)?;
    let ode = integrate_ode(&model, &tuned, &grid, n, seed, false, OdeMethod::Rk4)?;
    let mut report = mc_gap(&reference, &sde, &ode, anchor)?;
    report.params.beta = Some(config.beta);
    report.params.theta = theta;
    Ok(report)
}

/// Dissipative test system: forward drift `m y`, constant diffusion `g0`,
/// prior `N(0, I)` and score `-L y + offset`. Every constant of the
/// dissipativity assumptions is exact for it.
pub fn synthetic_dissipative_system(
    m: f64,
    g0: f64,
    l: f64,
    offset: Vec<f64>,
    horizon: f64,
) -> Result<(DiffusionModel, ScoreModel)> {
    let d = offset.len();
    let coeffs = LinearCoefficients::new(move |_| m, |_| 0.0, move |_| g0);
    let model = DiffusionModel::generic_linear(coeffs, horizon, GaussianLaw::standard(d))?;
    let score = ScoreModel::exact(ScoreBase::Affine { slope: l, offset })?;
    Ok((model, score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Cell {
    pub eta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub kappa: f64,
    pub a_hat: f64,
    pub coupled_l2: f64,
    pub w2_1d: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2CheckConfig {
    pub m: f64,
    pub l: f64,
    pub g0: f64,
    pub eta: f64,
    pub horizon: f64,
    pub n: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// Simulates the one-dimensional synthetic system with coupled SDE and ODE
/// batches and compares their coupled distance with the bound, using
/// constants estimated from both batches' paths.
pub fn w2_check(config: &W2CheckConfig) -> Result<W2Cell> {
    let (model, score) = synthetic_dissipative_system(config.m, config.g0, config.l, vec![0.0], config.horizon)?;
    let grid = TimeGrid::uniform(config.horizon, config.n_steps)?;
    let (n, seed) = (config.n, config.seed);
    let sde = integrate_sde(&model, &score, config.eta, &grid, n, seed, true)?;
    let ode = integrate_ode(&model, &score, &grid, n, seed, true, OdeMethod::Rk4)?;
    let m = config.m;
    let drift = move |_t: f64, y: &[f64], out: &mut [f64]| {
        for (o, v) in out.iter_mut().zip(y) {
            *o = -m * v;
        }
    };
    let est = estimate_assumptions(&drift, &score, &model, &sde)?;
    let est_ode = estimate_assumptions(&drift, &score, &model, &ode)?;
    let w = W2Assumptions::new(
        est.m.min(est_ode.m),
        est.l.max(est_ode.l),
        est.a.max(est_ode.a),
        est.g_inf,
        config.eta,
        None,
    );
    let bound = w2_bound(&w, config.horizon)?;
    let l2 = coupled_l2(&sde, &ode)?;
    Ok(W2Cell {
        eta: config.eta,
        horizon: config.horizon,
        kappa: w.kappa,
        a_hat: w.a,
        coupled_l2: l2,
        w2_1d: w2_1d(sde.terminal(), ode.terminal())?,
        bound,
        pass: l2 <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w2_examples() {
        let a = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(w2_1d(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((w2_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(w2_1d(&[], &a), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn w2_unequal_sizes_matches_replication() {
        // Replicating every sample k times leaves the empirical law unchanged.
        let a = [0.1, 0.7, -0.4];
        let b = [1.0, -2.0];
        let a6: Vec<f64> = a.iter().flat_map(|v| [*v, *v]).collect();
        let b6: Vec<f64> = b.iter().flat_map(|v| [*v, *v, *v]).collect();
        let direct = w2_1d(&a, &b).unwrap();
        let replicated = w2_1d(&a6, &b6).unwrap();
        assert!((direct - replicated).abs() < 1e-14);
    }

    #[test]
    fn bound_examples() {
        let w = W2Assumptions::new(2.0, 0.5, 3.0, 1.0, 1.0, Some(2.0));
        assert!((w.kappa - 3.25).abs() < 1e-15);
        let t = 1.7;
        let expected = ((0.25 * 3.0 + 1.0) * (1.0 - (-3.25f64 * t).exp()) / 3.25f64).sqrt();
        assert!((w2_bound(&w, t).unwrap() - expected).abs() < 1e-15);
        assert!((reward_gap_bound(&w, t).unwrap() - 2.0 * expected).abs() < 1e-15);
        assert_eq!(w2_bound(&w.with_eta(0.0), t).unwrap(), 0.0);
        let limit = ((0.25 * 3.0 + 1.0) / 3.25f64).sqrt();
        assert!((w2_bound(&w, 1e3).unwrap() - limit).abs() < 1e-15);
        let vacuous = W2Assumptions::new(0.1, 0.5, 1.0, 1.0, 1.0, None);
        assert!(matches!(w2_bound(&vacuous, 1.0), Err(Error::BoundInapplicable(_))));
    }

    #[test]
    fn infinite_regularization_pins_the_reference() {
        let r = analytic_gap(&FinetuneSpec::vp(1.0, 1e12, 3.0).unwrap()).unwrap();
        assert!(r.params.theta[0].abs() < 1e-11);
        assert!(r.delta < 1e-10 && r.improvement.abs() < 1e-10);
        // VE keeps the variance mismatch of the uncontrolled SDE and ODE.
        let (eta, t) = (1.0, 10.0);
        let r = analytic_gap(&FinetuneSpec::ve(eta, 1e12, t).unwrap()).unwrap();
        let c = finetune::contraction(ModelKind::Ve, eta, t).unwrap();
        let residual = 1.0 / (1.0 + t * t) - c * c;
        assert!((r.delta - residual).abs() < 1e-10);
        assert!((r.improvement - residual).abs() < 1e-10);
    }

    #[test]
    fn analytic_reports_have_zero_errors() {
        let r = analytic_gap(&FinetuneSpec::ve(1.0, 2.0, 10.0).unwrap()).unwrap();
        assert_eq!(r.bound, 0.05);
        assert_eq!((r.se_ref, r.se_sde, r.se_ode, r.se_delta), (0.0, 0.0, 0.0, 0.0));
        assert!(r.delta >= 0.0 && r.delta <= r.chain_bound.unwrap());
    }

    #[test]
    fn vp_gap_closed_form() {
        let (eta, beta, t) = (1.0, 2.0, 3.0);
        let r = analytic_gap(&FinetuneSpec::vp(eta, beta, t).unwrap()).unwrap();
        assert!((r.bound - 0.5 * (-9.0f64).exp()).abs() < 1e-20);
        // Unit variances cancel; only the means differ.
        let b = 1.0 / (1.0 + 0.5 * beta);
        let c = finetune::contraction(ModelKind::Vp, eta, t).unwrap();
        let c0 = finetune::contraction(ModelKind::Vp, 0.0, t).unwrap();
        let (mu_sde, mu_ode) = (b, b * (1.0 - c0) / (1.0 - c));
        let expected = (mu_sde - 1.0).powi(2) - (mu_ode - 1.0).powi(2);
        assert!((r.signed_gap - expected).abs() < 1e-15);
        assert!(r.delta <= r.chain_bound.unwrap());
    }

    #[test]
    fn estimated_constants_of_linear_maps_are_exact() {
        let (model, score) = synthetic_dissipative_system(2.0, 1.0, 0.5, vec![0.0], 2.0).unwrap();
        let grid = TimeGrid::uniform(2.0, 40).unwrap();
        let batch = integrate_sde(&model, &score, 1.0, &grid, 200, 3, true).unwrap();
        let drift = |_t: f64, y: &[f64], out: &mut [f64]| out[0] = -2.0 * y[0];
        let w = estimate_assumptions(&drift, &score, &model, &batch).unwrap();
        assert!((w.m - 2.0).abs() < 1e-9);
        assert!((w.l - 0.5).abs() < 1e-12);
        assert_eq!(w.g_inf, 1.0);
    }

    #[test]
    fn mixture_precondition_gate() {
        let prior = MixtureLaw::isotropic(vec![0.5, 0.5], &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[1.0, 1.0]).unwrap();
        let config = MixtureGapConfig {
            kind: ModelKind::Ve,
            eta: 1.2,
            beta: 2.0,
            horizon: 10.0,
            n: 100,
            n_steps: 50,
            seed: 1,
        };
        assert!(matches!(
            mixture_gap_experiment(&prior, &[1.0, 0.0], &config),
            Err(Error::MixturePrecondition(_))
        ));
        let skewed = MixtureLaw::isotropic(vec![0.3, 0.7], &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[1.0, 1.0]).unwrap();
        assert!(matches!(
            mixture_gap_experiment(&skewed, &[0.0, 1.0], &config),
            Err(Error::MixturePrecondition(_))
        ));
        let wide = MixtureLaw::isotropic(vec![0.5, 0.5], &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[2.0, 1.0]).unwrap();
        assert!(matches!(
            mixture_gap_experiment(&wide, &[0.0, 1.0], &config),
            Err(Error::MixturePrecondition(_))
        ));
        assert!(mixture_gap_experiment(&prior, &[0.0, 1.0], &config).is_ok());
    }

    #[test]
    fn uncoupled_batches_are_rejected() {
        let model = DiffusionModel::vp(1.0, 1).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let s = ScoreModel::standard_gaussian(1);
        let a = integrate_sde(&model, &s, 1.0, &grid, 10, 1, false).unwrap();
        let b = integrate_ode(&model, &s, &grid, 10, 2, false, OdeMethod::Rk4).unwrap();
        assert!(matches!(coupled_l2(&a, &b), Err(Error::UncoupledBatches(_))));
    }
}
