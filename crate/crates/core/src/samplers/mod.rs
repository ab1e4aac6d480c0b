//! Backward samplers: Euler-Maruyama for the eta-SDE, RK4 (or Euler) for the
//! probability-flow ODE, and the discrete gDDIM chain.
//!
//! With backward time `t` and forward time `tau = T - t` the SDE is
//!
//! ```text
//! dY = (-f(tau, Y) + (1 + eta^2) / 2 * g(tau)^2 * s(tau, Y)) dt + eta * g(tau) dB
//! ```
//!
//! Every trajectory owns a ChaCha8 stream selected by its index, and draws its
//! initial state before any step noise. Batches are therefore identical for any
//! number of worker threads, and an SDE and an ODE batch with the same seed
//! start from the same initial draws.

mod batch;
mod gddim;
mod grid;

pub use batch::{BatchMeta, SamplerKind, TrajectoryBatch, CSV_HEADER};
pub use gddim::{gddim_sample, gddim_sigma_sq, gddim_step};
pub use grid::{build_alpha_schedule, AlphaSchedule, ScheduleKind, TimeGrid, ALPHA_FLOOR, MAX_GRID_STEPS};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::{DiffusionModel, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::laws::GaussianLaw;

/// Random stream of trajectory `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[inline]
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OdeMethod {
    #[default]
    Rk4,
    Euler,
}

/// Draws initial states from a Gaussian law: `mean + L z`.
pub(crate) struct PriorSampler {
    mean: Vec<f64>,
    factor: DMatrix<f64>,
    diag: Option<Vec<f64>>,
}

impl PriorSampler {
    pub(crate) fn new(law: &GaussianLaw) -> Self {
        let factor = law.sampling_factor();
        let d = law.dim();
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || factor[(i, j)] == 0.0));
        Self {
            mean: law.mean().as_slice().to_vec(),
            diag: is_diag.then(|| (0..d).map(|i| factor[(i, i)]).collect()),
            factor,
        }
    }

    pub(crate) fn draw(&self, rng: &mut ChaCha8Rng, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = normal(rng);
        }
        match &self.diag {
            Some(sd) => {
                for i in 0..out.len() {
                    out[i] = self.mean[i] + sd[i] * z[i];
                }
            }
            None => {
                for i in 0..out.len() {
                    let mut acc = self.mean[i];
                    for j in 0..=i {
                        acc += self.factor[(i, j)] * z[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    m: f64,
    c: f64,
}

/// Precomputed per-step coefficients. When the score is affine with a diagonal
/// slope every step is `y <- m * y + c + sigma * z` per coordinate.
enum Plan {
    Affine {
        m: Vec<f64>,
        c: Vec<f64>,
        sigma: Vec<f64>,
    },
    General {
        steps: Vec<GeneralStep>,
        mode: GeneralMode,
    },
}

#[derive(Clone, Copy)]
enum GeneralMode {
    /// Euler(-Maruyama) with score weight `(1 + eta^2) / 2`.
    Euler { weight: f64 },
    Rk4,
}

/// Coefficients at the stage times `tau`, `tau - h/2`, `tau - h`.
struct GeneralStep {
    dt: f64,
    sigma: f64,
    tau: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    g2: [f64; 3],
}

fn general_steps(model: &DiffusionModel, grid: &TimeGrid, eta: f64) -> Vec<GeneralStep> {
    let horizon = grid.horizon();
    grid.nodes()
        .windows(2)
        .map(|w| {
            let dt = w[1] - w[0];
            let tau0 = horizon - w[0];
            let tau = [tau0, horizon - (w[0] + 0.5 * dt), (horizon - w[1]).max(0.0)];
            GeneralStep {
                dt,
                sigma: eta * model.diffusion(tau0) * dt.sqrt(),
                tau,
                a: tau.map(|t| model.drift_coeff(t)),
                b: tau.map(|t| model.drift_offset(t)),
                g2: tau.map(|t| model.diffusion_sq(t)),
            }
        })
        .collect()
}

/// Drift `-a y - b + w g^2 (-p y + q)` as an affine map of `y`.
#[inline]
fn drift_affine(a: f64, b: f64, g2: f64, weight: f64, p: f64, q: f64) -> Affine {
    Affine {
        m: -a - weight * g2 * p,
        c: -b + weight * g2 * q,
    }
}

#[inline]
fn euler_map(k: Affine, dt: f64) -> Affine {
    Affine {
        m: 1.0 + dt * k.m,
        c: dt * k.c,
    }
}

fn rk4_map(k_start: Affine, k_mid: Affine, k_end: Affine, h: f64) -> Affine {
    let k1 = k_start;
    let y2 = Affine {
        m: 1.0 + 0.5 * h * k1.m,
        c: 0.5 * h * k1.c,
    };
    let k2 = Affine {
        m: k_mid.m * y2.m,
        c: k_mid.m * y2.c + k_mid.c,
    };
    let y3 = Affine {
        m: 1.0 + 0.5 * h * k2.m,
        c: 0.5 * h * k2.c,
    };
    let k3 = Affine {
        m: k_mid.m * y3.m,
        c: k_mid.m * y3.c + k_mid.c,
    };
    let y4 = Affine {
        m: 1.0 + h * k3.m,
        c: h * k3.c,
    };
    let k4 = Affine {
        m: k_end.m * y4.m,
        c: k_end.m * y4.c + k_end.c,
    };
    Affine {
        m: 1.0 + h / 6.0 * (k1.m + 2.0 * k2.m + 2.0 * k3.m + k4.m),
        c: h / 6.0 * (k1.c + 2.0 * k2.c + 2.0 * k3.c + k4.c),
    }
}

fn build_plan(
    model: &DiffusionModel,
    score: &ScoreModel,
    grid: &TimeGrid,
    eta: f64,
    mode: GeneralMode,
) -> Result<Plan> {
    let d = model.dim();
    let steps = general_steps(model, grid, eta);
    let (mut p, mut q) = (vec![0.0; 3 * d], vec![0.0; 3 * d]);
    let mut m_all = Vec::with_capacity(steps.len() * d);
    let mut c_all = Vec::with_capacity(steps.len() * d);
    for st in &steps {
        let stages = match mode {
            GeneralMode::Euler { .. } => 1,
            GeneralMode::Rk4 => 3,
        };
        for s in 0..stages {
            let (ps, qs) = (&mut p[s * d..(s + 1) * d], &mut q[s * d..(s + 1) * d]);
            if !score.affine_form(model, st.tau[s], ps, qs)? {
                return Ok(Plan::General { steps, mode });
            }
        }
        for i in 0..d {
            let map = match mode {
                GeneralMode::Euler { weight } => {
                    euler_map(drift_affine(st.a[0], st.b[0], st.g2[0], weight, p[i], q[i]), st.dt)
                }
                GeneralMode::Rk4 => {
                    let k = |s: usize| {
                        drift_affine(st.a[s], st.b[s], st.g2[s], 0.5, p[s * d + i], q[s * d + i])
                    };
                    rk4_map(k(0), k(1), k(2), st.dt)
                }
            };
            m_all.push(map.m);
            c_all.push(map.c);
        }
    }
    Ok(Plan::Affine {
        m: m_all,
        c: c_all,
        sigma: steps.iter().map(|s| s.sigma).collect(),
    })
}

struct Scratch {
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            y: vec![0.0; d],
            z: vec![0.0; d],
            s: vec![0.0; d],
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
        }
    }
}

struct Driver<'a> {
    model: &'a DiffusionModel,
    score: &'a ScoreModel,
    plan: Plan,
    prior: PriorSampler,
    seed: u64,
    dim: usize,
    steps: usize,
}

impl Driver<'_> {
    fn diverged(step: usize, trajectory: usize) -> Error {
        Error::Diverged { step, trajectory }
    }

    fn simulate(&self, i: usize, scr: &mut Scratch, term: &mut [f64], mut path: Option<&mut [f64]>) -> Result<()> {
        let d = self.dim;
        let mut rng = substream(self.seed, i as u64);
        self.prior.draw(&mut rng, &mut scr.z, &mut scr.y);
        if let Some(p) = path.as_deref_mut() {
            p[..d].copy_from_slice(&scr.y);
        }
        match &self.plan {
            Plan::Affine { m, c, sigma } if d == 1 => {
                let mut y = scr.y[0];
                for k in 0..self.steps {
                    y = m[k] * y + c[k];
                    if sigma[k] != 0.0 {
                        y += sigma[k] * normal(&mut rng);
                    }
                    if !y.is_finite() {
                        return Err(Self::diverged(k, i));
                    }
                    if let Some(p) = path.as_deref_mut() {
                        p[k + 1] = y;
                    }
                }
                scr.y[0] = y;
            }
            Plan::Affine { m, c, sigma } => {
                for k in 0..self.steps {
                    let (mk, ck) = (&m[k * d..(k + 1) * d], &c[k * d..(k + 1) * d]);
                    for j in 0..d {
                        scr.y[j] = mk[j] * scr.y[j] + ck[j];
                    }
                    if sigma[k] != 0.0 {
                        for j in 0..d {
                            scr.y[j] += sigma[k] * normal(&mut rng);
                        }
                    }
                    self.finish_step(k, i, scr, path.as_deref_mut())?;
                }
            }
            Plan::General { steps, mode } => {
                for (k, st) in steps.iter().enumerate() {
                    match *mode {
                        GeneralMode::Euler { weight } => {
                            self.score.eval(self.model, st.tau[0], &scr.y, &mut scr.s)?;
                            for j in 0..d {
                                let drift = -(st.a[0] * scr.y[j] + st.b[0]) + weight * st.g2[0] * scr.s[j];
                                scr.y[j] += drift * st.dt;
                            }
                            if st.sigma != 0.0 {
                                for j in 0..d {
                                    scr.y[j] += st.sigma * normal(&mut rng);
                                }
                            }
                        }
                        GeneralMode::Rk4 => self.rk4_step(st, scr)?,
                    }
                    self.finish_step(k, i, scr, path.as_deref_mut())?;
                }
            }
        }
        term.copy_from_slice(&scr.y);
        Ok(())
    }

    fn finish_step(&self, k: usize, i: usize, scr: &Scratch, path: Option<&mut [f64]>) -> Result<()> {
        if scr.y.iter().any(|v| !v.is_finite()) {
            return Err(Self::diverged(k, i));
        }
        if let Some(p) = path {
            let d = self.dim;
            p[(k + 1) * d..(k + 2) * d].copy_from_slice(&scr.y);
        }
        Ok(())
    }

    fn rk4_step(&self, st: &GeneralStep, scr: &mut Scratch) -> Result<()> {
        let d = self.dim;
        let h = st.dt;
        let stage = [0usize, 1, 1, 2];
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        for r in 0..4 {
            for j in 0..d {
                scr.tmp[j] = if r == 0 {
                    scr.y[j]
                } else {
                    scr.y[j] + offsets[r] * scr.k[r - 1][j]
                };
            }
            let s = stage[r];
            self.score.eval(self.model, st.tau[s], &scr.tmp, &mut scr.s)?;
            for j in 0..d {
                scr.k[r][j] = -(st.a[s] * scr.tmp[j] + st.b[s]) + 0.5 * st.g2[s] * scr.s[j];
            }
        }
        for j in 0..d {
            scr.y[j] += h / 6.0 * (scr.k[0][j] + 2.0 * scr.k[1][j] + 2.0 * scr.k[2][j] + scr.k[3][j]);
        }
        Ok(())
    }

    fn run(&self, n: usize, keep_paths: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let d = self.dim;
        let mut terminal = vec![0.0; n * d];
        let per = (self.steps + 1) * d;
        let mut paths = keep_paths.then(|| vec![0.0; n * per]);
        let init = || Scratch::new(d);
        let first_error = match paths.as_mut() {
            Some(p) => terminal
                .par_chunks_mut(d)
                .zip(p.par_chunks_mut(per))
                .enumerate()
                .map_init(init, |scr, (i, (term, path))| {
                    self.simulate(i, scr, term, Some(path)).err().map(|e| (i, e))
                })
                .flatten()
                .min_by_key(|(i, _)| *i),
            None => terminal
                .par_chunks_mut(d)
                .enumerate()
                .map_init(init, |scr, (i, term)| self.simulate(i, scr, term, None).err().map(|e| (i, e)))
                .flatten()
                .min_by_key(|(i, _)| *i),
        };
        match first_error {
            Some((_, e)) => Err(e),
            None => Ok((terminal, paths)),
        }
    }
}

fn validate(model: &DiffusionModel, score: &ScoreModel, grid: &TimeGrid, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyInput("trajectory count"));
    }
    if let Some(d) = score.dim() {
        check_dim(model.dim(), d)?;
    }
    if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon(),
            model.horizon()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn integrate(
    model: &DiffusionModel,
    score: &ScoreModel,
    eta: f64,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    keep_paths: bool,
    mode: GeneralMode,
    sampler: SamplerKind,
) -> Result<TrajectoryBatch> {
    validate(model, score, grid, n)?;
    let driver = Driver {
        model,
        score,
        plan: build_plan(model, score, grid, eta, mode)?,
        prior: PriorSampler::new(model.backward_prior()),
        seed,
        dim: model.dim(),
        steps: grid.n_steps(),
    };
    let (terminal, paths) = driver.run(n, keep_paths)?;
    let meta = BatchMeta {
        model: model.id().to_string(),
        sampler,
        eta,
        seed,
        grid: grid.clone(),
    };
    TrajectoryBatch::new(meta, n, model.dim(), terminal, paths)
}

/// Euler-Maruyama integration of the eta-SDE from the model's backward prior.
pub fn integrate_sde(
    model: &DiffusionModel,
    score: &ScoreModel,
    eta: f64,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    keep_paths: bool,
) -> Result<TrajectoryBatch> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be nonnegative, got {eta}")));
    }
    let weight = 0.5 * (1.0 + eta * eta);
    integrate(model, score, eta, grid, n, seed, keep_paths, GeneralMode::Euler { weight }, SamplerKind::Sde)
}

/// Probability-flow ODE from the model's backward prior; randomness enters only
/// through the initial draw.
pub fn integrate_ode(
    model: &DiffusionModel,
    score: &ScoreModel,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    keep_paths: bool,
    method: OdeMethod,
) -> Result<TrajectoryBatch> {
    let (mode, kind) = match method {
        OdeMethod::Rk4 => (GeneralMode::Rk4, SamplerKind::OdeRk4),
        OdeMethod::Euler => (GeneralMode::Euler { weight: 0.5 }, SamplerKind::OdeEuler),
    };
    integrate(model, score, 0.0, grid, n, seed, keep_paths, mode, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Control, LinearCoefficients, ScoreBase};
    use crate::laws::MixtureLaw;
    use crate::stats::mean_var;

    #[test]
    fn sde_at_eta_zero_equals_euler_ode() {
        let model = DiffusionModel::ve(3.0, 1).unwrap();
        let score = ScoreModel::standard_gaussian(1)
            .with_control(Some(Control::ConstantShift(vec![-0.4])))
            .unwrap();
        let grid = TimeGrid::uniform(3.0, 50).unwrap();
        let a = integrate_sde(&model, &score, 0.0, &grid, 200, 11, true).unwrap();
        let b = integrate_ode(&model, &score, &grid, 200, 11, true, OdeMethod::Euler).unwrap();
        assert_eq!(a.terminal(), b.terminal());
        assert_eq!(a.path(17), b.path(17));
    }

    #[test]
    fn frozen_flow_returns_initial_draws() {
        let coeffs = LinearCoefficients::new(|_| 0.0, |_| 0.0, |_| 1.0);
        let model = DiffusionModel::generic_linear(coeffs, 1.0, GaussianLaw::standard(1)).unwrap();
        let zero = ScoreModel::exact(ScoreBase::Affine {
            slope: 0.0,
            offset: vec![0.0],
        })
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = integrate_ode(&model, &zero, &grid, 50, 3, true, OdeMethod::Rk4).unwrap();
        for i in 0..50 {
            let p = b.path(i).unwrap();
            assert!(p.iter().all(|v| *v == p[0]));
        }
    }

    #[test]
    fn general_and_affine_plans_agree() {
        // A one-component mixture takes the general path but has the same score.
        let model = DiffusionModel::ve(2.0, 1).unwrap();
        let gauss = ScoreModel::standard_gaussian(1);
        let mix = ScoreModel::exact(ScoreBase::ExactMixture(
            MixtureLaw::isotropic(vec![1.0], &[vec![0.0]], &[1.0]).unwrap(),
        ))
        .unwrap();
        let grid = TimeGrid::uniform(2.0, 40).unwrap();
        for eta in [0.0, 1.0] {
            let a = integrate_sde(&model, &gauss, eta, &grid, 100, 5, false).unwrap();
            let b = integrate_sde(&model, &mix, eta, &grid, 100, 5, false).unwrap();
            for (u, v) in a.terminal().iter().zip(b.terminal()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let a = integrate_ode(&model, &gauss, &grid, 100, 5, false, OdeMethod::Rk4).unwrap();
        let b = integrate_ode(&model, &mix, &grid, 100, 5, false, OdeMethod::Rk4).unwrap();
        for (u, v) in a.terminal().iter().zip(b.terminal()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_ode_matches_closed_form_map() {
        // VE probability flow with exact score: y scales with sqrt(1 + tau^2)
        let model = DiffusionModel::ve(3.0, 1).unwrap();
        let grid = TimeGrid::uniform(3.0, 400).unwrap();
        let b = integrate_ode(&model, &ScoreModel::standard_gaussian(1), &grid, 20, 1, true, OdeMethod::Rk4)
            .unwrap();
        for i in 0..20 {
            let y0 = b.state(i, 0).unwrap()[0];
            let expected = y0 / 10f64.sqrt();
            assert!((b.sample(i)[0] - expected).abs() < 1e-9 * y0.abs().max(1.0));
        }
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let coeffs = LinearCoefficients::new(|_| -5000.0, |_| 0.0, |_| 0.0);
        let model = DiffusionModel::generic_linear(coeffs, 10.0, GaussianLaw::standard(1)).unwrap();
        let zero = ScoreModel::exact(ScoreBase::Affine {
            slope: 0.0,
            offset: vec![0.0],
        })
        .unwrap();
        let grid = TimeGrid::uniform(10.0, 1000).unwrap();
        let err = integrate_sde(&model, &zero, 1.0, &grid, 4, 0, false).unwrap_err();
        assert!(matches!(err, Error::Diverged { trajectory: 0, .. }), "{err:?}");
    }

    #[test]
    fn batches_are_seed_deterministic_and_thread_independent() {
        let model = DiffusionModel::vp(2.0, 2).unwrap();
        let score = ScoreModel::exact(ScoreBase::ExactVp).unwrap();
        let grid = TimeGrid::uniform(2.0, 30).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| integrate_sde(&model, &score, 1.2, &grid, 257, 99, false).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.terminal(), b.terminal());
        let c = integrate_sde(&model, &score, 1.2, &grid, 257, 100, false).unwrap();
        assert_ne!(a.terminal(), c.terminal());
    }

    #[test]
    fn ve_reference_sde_matches_terminal_variance() {
        let (t, eta) = (3.0f64, 1.0f64);
        let model = DiffusionModel::ve(t, 1).unwrap();
        let grid = TimeGrid::uniform(t, 2000).unwrap();
        let n = 100_000;
        let b = integrate_sde(&model, &ScoreModel::standard_gaussian(1), eta, &grid, n, 2024, false).unwrap();
        let xs = b.column(0);
        let (m, v) = mean_var(&xs);
        let target = 1.0 - (1.0 + t * t).powf(-(1.0 + eta * eta));
        let se_v = crate::stats::variance_se(&xs);
        assert!(m.abs() < 3.0 * (v / n as f64).sqrt(), "mean {m}");
        assert!((v - target).abs() < 3.0 * se_v, "var {v} vs {target} (se {se_v})");
    }

    #[test]
    fn vp_reference_sde_preserves_unit_variance() {
        let model = DiffusionModel::vp(3.0, 1).unwrap();
        let grid = TimeGrid::uniform(3.0, 2000).unwrap();
        let n = 100_000;
        let b = integrate_sde(&model, &ScoreModel::standard_gaussian(1), 1.2, &grid, n, 7, false).unwrap();
        let xs = b.column(0);
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 3.0 * (v / n as f64).sqrt(), "mean {m}");
        assert!((v - 1.0).abs() < 3.0 * crate::stats::variance_se(&xs), "var {v}");
    }

    #[test]
    fn ve_reference_ode_variance() {
        let model = DiffusionModel::ve(3.0, 1).unwrap();
        let grid = TimeGrid::uniform(3.0, 200).unwrap();
        let n = 100_000;
        let b = integrate_ode(&model, &ScoreModel::standard_gaussian(1), &grid, n, 3, false, OdeMethod::Rk4)
            .unwrap();
        let xs = b.column(0);
        let (_, v) = mean_var(&xs);
        assert!((v - 0.9).abs() < 3.0 * crate::stats::variance_se(&xs), "var {v}");
    }
}
