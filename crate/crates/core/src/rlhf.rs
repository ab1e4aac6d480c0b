//! Policy-gradient fine-tuning of the control parameter on the discretized
//! backward SDE (DDPO-style REINFORCE and GRPO).
//!
//! The policy is the Euler-Maruyama transition of the eta-SDE with the exact
//! `N(0, I)` score shifted by the control. For VE and VP the transition mean is
//! affine in both the state and `theta`:
//!
//! ```text
//! mean_k(y, theta) = m_k y + c_k + b_k theta,   var_k = eta^2 g(tau_k)^2 dt_k
//! ```
//!
//! so `grad_theta log p(x_{k+1} | x_k) = (x_{k+1} - mean_k) / var_k * b_k`.

use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Control, DiffusionModel, ModelKind, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::finetune::{self, FinetuneSpec, KlReference};
use crate::samplers::{integrate_ode, normal, substream, OdeMethod, PriorSampler, TimeGrid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Largest admissible `|log rho|` before the ratio is treated as overflowing.
const MAX_LOG_RATIO: f64 = 700.0;
const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlForm {
    Constant,
    Decayed,
}

#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub model: DiffusionModel,
    pub control_form: ControlForm,
    pub theta: Vec<f64>,
    pub eta: f64,
    pub grid: TimeGrid,
}

impl PolicySpec {
    pub fn new(
        model: DiffusionModel,
        control_form: ControlForm,
        theta: Vec<f64>,
        eta: f64,
        grid: TimeGrid,
    ) -> Result<Self> {
        if !matches!(model.kind(), ModelKind::Ve | ModelKind::Vp) {
            return Err(Error::InvalidArgument("policies need a VE or VP model".into()));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "policy stochasticity must be positive, got {eta}"
            )));
        }
        check_dim(model.dim(), theta.len())?;
        if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(Error::InvalidArgument("grid and model horizons differ".into()));
        }
        Ok(Self {
            model,
            control_form,
            theta,
            eta,
            grid,
        })
    }

    /// Policy with the control form that has a closed-form terminal law:
    /// constant shift for VE, decayed shift for VP.
    pub fn canonical(model: DiffusionModel, theta: Vec<f64>, eta: f64, grid: TimeGrid) -> Result<Self> {
        let form = match model.kind() {
            ModelKind::Vp => ControlForm::Decayed,
            _ => ControlForm::Constant,
        };
        Self::new(model, form, theta, eta, grid)
    }

    pub fn control(&self) -> Control {
        self.control_with(self.theta.clone())
    }

    fn control_with(&self, theta: Vec<f64>) -> Control {
        match self.control_form {
            ControlForm::Constant => Control::ConstantShift(theta),
            ControlForm::Decayed => Control::DecayedShift(theta),
        }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        check_dim(self.theta.len(), theta.len())?;
        Ok(Self {
            theta,
            ..self.clone()
        })
    }

    /// Whether the closed forms of the fine-tuning module describe this policy.
    pub fn has_closed_form(&self) -> bool {
        matches!(
            (self.model.kind(), self.control_form),
            (ModelKind::Ve, ControlForm::Constant) | (ModelKind::Vp, ControlForm::Decayed)
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct StepCoef {
    m: f64,
    c: f64,
    b: f64,
    var: f64,
    sigma: f64,
}

struct Compiled {
    steps: Vec<StepCoef>,
    prior: PriorSampler,
    dim: usize,
}

impl Compiled {
    fn new(policy: &PolicySpec) -> Result<Self> {
        let model = &policy.model;
        let d = model.dim();
        let base = ScoreModel::standard_gaussian(d);
        let horizon = policy.grid.horizon();
        let weight = 0.5 * (1.0 + policy.eta * policy.eta);
        let unit = policy.control_with(vec![1.0; d]);
        let (mut p, mut q) = (vec![0.0; d], vec![0.0; d]);
        let mut steps = Vec::with_capacity(policy.grid.n_steps());
        for (k, w) in policy.grid.nodes().windows(2).enumerate() {
            let dt = w[1] - w[0];
            let tau = horizon - w[0];
            if !base.affine_form(model, tau, &mut p, &mut q)? {
                return Err(Error::InvalidArgument("policy score must be affine".into()));
            }
            let g2 = model.diffusion_sq(tau);
            let var = policy.eta * policy.eta * g2 * dt;
            if !(var > 0.0) {
                return Err(Error::DegeneratePolicyStep(k));
            }
            steps.push(StepCoef {
                m: 1.0 + dt * (-model.drift_coeff(tau) - weight * g2 * p[0]),
                c: dt * (-model.drift_offset(tau) + weight * g2 * q[0]),
                b: -dt * weight * g2 * p[0] * unit.weight(tau),
                var,
                sigma: var.sqrt(),
            });
        }
        Ok(Self {
            steps,
            prior: PriorSampler::new(model.backward_prior()),
            dim: d,
        })
    }

    #[inline]
    fn mean(&self, k: usize, y: f64, theta: f64) -> f64 {
        let s = &self.steps[k];
        s.m * y + s.c + s.b * theta
    }

    fn log_density(&self, k: usize, x_now: &[f64], x_next: &[f64], theta: &[f64]) -> f64 {
        let s = &self.steps[k];
        let mut acc = -0.5 * self.dim as f64 * (LN_2PI + s.var.ln());
        for j in 0..self.dim {
            let r = x_next[j] - self.mean(k, x_now[j], theta[j]);
            acc -= 0.5 * r * r / s.var;
        }
        acc
    }
}

/// Per-step Gaussian log-density of the Euler transition `x_now -> x_next` at step `k`.
pub fn step_log_density(x_next: &[f64], x_now: &[f64], policy: &PolicySpec, step_index: usize) -> Result<f64> {
    check_dim(policy.model.dim(), x_now.len())?;
    check_dim(policy.model.dim(), x_next.len())?;
    if step_index >= policy.grid.n_steps() {
        return Err(Error::InvalidArgument(format!("step {step_index} is out of range")));
    }
    let compiled = Compiled::new(policy)?;
    Ok(compiled.log_density(step_index, x_now, x_next, &policy.theta))
}

pub type RewardFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Reward {
    /// `-||x - anchor||^2`, which also enables closed-form KL and gap columns.
    Quadratic(Vec<f64>),
    Custom(RewardFn),
}

impl Reward {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Reward::Quadratic(anchor) => finetune::quadratic_reward(x, anchor),
            Reward::Custom(f) => f(x),
        }
    }

    pub fn anchor(&self) -> Option<&[f64]> {
        match self {
            Reward::Quadratic(a) => Some(a),
            Reward::Custom(_) => None,
        }
    }
}

impl std::fmt::Debug for Reward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reward::Quadratic(a) => f.debug_tuple("Quadratic").field(a).finish(),
            Reward::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Rolled-out trajectories with their terminal rewards. States are stored as
/// `len x (steps + 1) x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    dim: usize,
    steps: usize,
    states: Vec<f64>,
    log_likelihoods: Vec<f64>,
    rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn group_size(&self) -> usize {
        self.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Path log-likelihood recorded while sampling.
    pub fn log_likelihoods(&self) -> &[f64] {
        &self.log_likelihoods
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let per = (self.steps + 1) * self.dim;
        &self.states[i * per..(i + 1) * per]
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        &self.path(i)[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        self.state(i, self.steps)
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.len() as f64
    }

    /// Splits into consecutive groups of `size`.
    pub fn split(&self, size: usize) -> Vec<RolloutGroup> {
        let per = (self.steps + 1) * self.dim;
        (0..self.len() / size)
            .map(|g| {
                let r = g * size..(g + 1) * size;
                RolloutGroup {
                    dim: self.dim,
                    steps: self.steps,
                    states: self.states[r.start * per..r.end * per].to_vec(),
                    log_likelihoods: self.log_likelihoods[r.clone()].to_vec(),
                    rewards: self.rewards[r].to_vec(),
                }
            })
            .collect()
    }
}

/// Samples `n` trajectories under `policy`; trajectory `i` uses the random
/// stream `stream(i)` of `seed` and draws its initial state first.
fn rollout_streams(
    policy: &PolicySpec,
    n: usize,
    seed: u64,
    reward: &Reward,
    stream: &(dyn Fn(usize) -> u64 + Sync),
) -> Result<RolloutGroup> {
    if n == 0 {
        return Err(Error::EmptyInput("rollout count"));
    }
    let compiled = Compiled::new(policy)?;
    let d = compiled.dim;
    let steps = compiled.steps.len();
    let per = (steps + 1) * d;
    let mut states = vec![0.0; n * per];
    let mut log_likelihoods = vec![0.0; n];
    let mut rewards = vec![0.0; n];
    let theta = &policy.theta;
    let first_error = states
        .par_chunks_mut(per)
        .zip(log_likelihoods.par_iter_mut())
        .zip(rewards.par_iter_mut())
        .enumerate()
        .map_init(
            || vec![0.0; d],
            |z, (i, ((path, ll), r))| {
                let mut rng = substream(seed, stream(i));
                let (head, tail) = path.split_at_mut(d);
                compiled.prior.draw(&mut rng, z, head);
                let _ = tail;
                let mut acc = 0.0;
                for k in 0..steps {
                    let s = compiled.steps[k];
                    let (done, rest) = path.split_at_mut((k + 1) * d);
                    let now = &done[k * d..];
                    let next = &mut rest[..d];
                    for j in 0..d {
                        let eps = normal(&mut rng);
                        next[j] = compiled.mean(k, now[j], theta[j]) + s.sigma * eps;
                        acc -= 0.5 * eps * eps;
                    }
                    acc -= 0.5 * d as f64 * (LN_2PI + s.var.ln());
                    if next.iter().any(|v| !v.is_finite()) {
                        return Some(Error::Diverged { step: k, trajectory: i });
                    }
                }
                *ll = acc;
                *r = reward.eval(&path[steps * d..]);
                None
            },
        )
        .flatten()
        .min_by_key(|e| match e {
            Error::Diverged { trajectory, .. } => *trajectory,
            _ => usize::MAX,
        });
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(RolloutGroup {
        dim: d,
        steps,
        states,
        log_likelihoods,
        rewards,
    })
}

/// `n` on-policy rollouts with independent streams `0..n` of `seed`.
pub fn rollout(policy: &PolicySpec, n: usize, seed: u64, reward: &Reward) -> Result<RolloutGroup> {
    rollout_streams(policy, n, seed, reward, &|i| i as u64)
}

/// Sum over trajectories of `weight_i * grad_theta log p(path_i)`, divided by the count.
fn weighted_score(batch: &RolloutGroup, compiled: &Compiled, theta: &[f64], weights: &[f64]) -> Vec<f64> {
    let d = batch.dim;
    let mut grad = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for k in 0..batch.steps {
            let s = compiled.steps[k];
            let (now, next) = (batch.state(i, k), batch.state(i, k + 1));
            for j in 0..d {
                let r = next[j] - compiled.mean(k, now[j], theta[j]);
                grad[j] += w * r / s.var * s.b;
            }
        }
    }
    let n = weights.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

/// REINFORCE estimate of `grad_theta E[r(x_0)]`, optionally with the batch-mean
/// reward as baseline.
pub fn ddpo_gradient(batch: &RolloutGroup, policy: &PolicySpec, baseline: bool) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("rollout batch"));
    }
    check_dim(policy.model.dim(), batch.dim)?;
    check_dim(policy.grid.n_steps(), batch.steps)?;
    let compiled = Compiled::new(policy)?;
    let b = if baseline { batch.mean_reward() } else { 0.0 };
    let weights: Vec<f64> = batch.rewards.iter().map(|r| r - b).collect();
    Ok(weighted_score(batch, &compiled, &policy.theta, &weights))
}

/// Per-path score `grad_theta log p(path)` of every trajectory.
pub fn path_scores(batch: &RolloutGroup, policy: &PolicySpec) -> Result<Vec<Vec<f64>>> {
    let compiled = Compiled::new(policy)?;
    let d = batch.dim;
    Ok((0..batch.len())
        .map(|i| {
            let mut score = vec![0.0; d];
            for k in 0..batch.steps {
                let s = compiled.steps[k];
                let (now, next) = (batch.state(i, k), batch.state(i, k + 1));
                for j in 0..d {
                    score[j] += (next[j] - compiled.mean(k, now[j], policy.theta[j])) / s.var * s.b;
                }
            }
            score
        })
        .collect())
}

/// Path log-likelihood recomputed from the stored states.
pub fn path_log_likelihood(batch: &RolloutGroup, i: usize, policy: &PolicySpec) -> Result<f64> {
    let compiled = Compiled::new(policy)?;
    Ok((0..batch.steps)
        .map(|k| compiled.log_density(k, batch.state(i, k), batch.state(i, k + 1), &policy.theta))
        .sum())
}

/// Standardized rewards `(r_i - mean) / std` with the population std.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument("a group needs at least two members".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if !(std > 4.0 * f64::EPSILON * scale) || !std.is_finite() {
        return Err(Error::DegenerateGroup);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoSurrogate {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub used_groups: usize,
    pub skipped_groups: usize,
}

/// Clipped surrogate averaged over groups, members and steps, with its
/// gradient in `theta_new`. Rollouts were drawn under `policy.theta`.
pub fn grpo_objective(
    groups: &[RolloutGroup],
    policy: &PolicySpec,
    theta_new: &[f64],
    clip_eps: f64,
) -> Result<GrpoSurrogate> {
    check_dim(policy.theta.len(), theta_new.len())?;
    if !(clip_eps > 0.0 && clip_eps < 1.0) {
        return Err(Error::InvalidArgument(format!("clip range must be in (0, 1), got {clip_eps}")));
    }
    let compiled = Compiled::new(policy)?;
    let d = compiled.dim;
    let theta_old = &policy.theta;
    let (mut value, mut grad) = (0.0, vec![0.0; d]);
    let (mut used, mut skipped) = (0usize, 0usize);
    let mut step_grad = vec![0.0; d];
    for group in groups {
        check_dim(d, group.dim)?;
        let adv = match grpo_advantages(&group.rewards) {
            Ok(a) => a,
            Err(Error::DegenerateGroup) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        used += 1;
        let norm = 1.0 / (group.len() * group.steps) as f64;
        let (mut gv, mut gg) = (0.0, vec![0.0; d]);
        for (i, a) in adv.iter().enumerate() {
            for k in 0..group.steps {
                let s = compiled.steps[k];
                let (now, next) = (group.state(i, k), group.state(i, k + 1));
                let mut log_ratio = 0.0;
                for j in 0..d {
                    let r_new = next[j] - compiled.mean(k, now[j], theta_new[j]);
                    let r_old = next[j] - compiled.mean(k, now[j], theta_old[j]);
                    log_ratio += 0.5 * (r_old * r_old - r_new * r_new) / s.var;
                    step_grad[j] = r_new / s.var * s.b;
                }
                if !(log_ratio.abs() <= MAX_LOG_RATIO) {
                    return Err(Error::RatioOverflow);
                }
                let rho = log_ratio.exp();
                let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                let (plain, cut) = (rho * a, clipped * a);
                if plain <= cut {
                    gv += plain;
                    for j in 0..d {
                        gg[j] += a * rho * step_grad[j];
                    }
                } else {
                    gv += cut;
                }
            }
        }
        value += gv * norm;
        for j in 0..d {
            grad[j] += gg[j] * norm;
        }
    }
    if used > 0 {
        value /= used as f64;
        grad.iter_mut().for_each(|g| *g /= used as f64);
    }
    Ok(GrpoSurrogate {
        value,
        gradient: grad,
        used_groups: used,
        skipped_groups: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// DDPO rollouts per iteration.
    pub batch_size: usize,
    pub group_size: usize,
    pub groups_per_iter: usize,
    pub learning_rate: f64,
    pub clip_eps: f64,
    /// Weight of the closed-form terminal KL term; `None` trains on reward alone.
    pub beta: Option<f64>,
    pub kl_reference: KlReference,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// GRPO gradient steps per sampled batch.
    pub epochs: usize,
    pub baseline: bool,
    /// Give every member of a GRPO group the same random stream.
    pub shared_group_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            batch_size: 1024,
            group_size: 16,
            groups_per_iter: 64,
            learning_rate: 0.1,
            clip_eps: 0.2,
            beta: None,
            kl_reference: KlReference::DataLaw,
            seed: 0,
            optimizer: Optimizer::Sgd,
            epochs: 1,
            baseline: true,
            shared_group_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip range must be in (0, 1), got {}", self.clip_eps));
        }
        if self.batch_size == 0 || self.groups_per_iter == 0 || self.epochs == 0 {
            return bad("batch size, groups per iteration and epochs must be positive".into());
        }
        if self.group_size < 2 {
            return bad("group size must be at least 2".into());
        }
        if let Some(b) = self.beta {
            if !(b.is_finite() && b >= 0.0) {
                return bad(format!("beta must be nonnegative, got {b}"));
            }
        }
        if let Optimizer::Momentum(m) = self.optimizer {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum must be in [0, 1), got {m}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    /// Mean reward of the SDE rollouts at `theta`.
    pub j_sde: f64,
    pub se_sde: f64,
    /// Mean reward of probability-flow ODE samples from the same initial draws.
    pub j_ode: f64,
    /// Closed-form `|J_SDE - J_ODE|` at `theta` (NaN without a closed form).
    pub gap: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub theta: Vec<f64>,
    pub rows: Vec<TrainRow>,
    pub skipped_groups: usize,
    /// Largest `|mean|` and `|std - 1|` over all advantage groups used.
    pub max_advantage_mean_error: f64,
    pub max_advantage_std_error: f64,
    /// Total sampled transitions (trajectories times steps).
    pub path_steps: usize,
}

/// Trailing moving averages of `j_sde` over `window` iterations with their
/// standard errors.
pub fn smoothed_rewards(rows: &[TrainRow], window: usize) -> Vec<(f64, f64)> {
    if window == 0 || rows.len() < window {
        return Vec::new();
    }
    rows.windows(window)
        .map(|w| {
            let k = window as f64;
            let mean = w.iter().map(|r| r.j_sde).sum::<f64>() / k;
            let se = w.iter().map(|r| r.se_sde * r.se_sde).sum::<f64>().sqrt() / k;
            (mean, se)
        })
        .collect()
}

/// Whether the smoothed reward never drops by more than `z` combined
/// standard errors between consecutive windows.
pub fn smoothed_non_decreasing(rows: &[TrainRow], window: usize, z: f64) -> bool {
    smoothed_rewards(rows, window)
        .windows(2)
        .all(|p| p[1].0 - p[0].0 >= -z * (p[0].1 * p[0].1 + p[1].1 * p[1].1).sqrt())
}

fn iteration_seed(seed: u64, it: usize) -> u64 {
    substream(seed, u64::MAX - it as u64).next_u64()
}

struct Trainer<'a> {
    policy: PolicySpec,
    config: &'a TrainConfig,
    reward: &'a Reward,
    spec: Option<FinetuneSpec>,
    velocity: Vec<f64>,
    start: Instant,
}

impl<'a> Trainer<'a> {
    fn new(policy: &PolicySpec, config: &'a TrainConfig, reward: &'a Reward) -> Result<Self> {
        config.validate()?;
        let closed = policy.has_closed_form();
        if config.beta.is_some_and(|b| b > 0.0) && !closed {
            return Err(Error::InvalidArgument(
                "the KL term needs the closed-form control of the model".into(),
            ));
        }
        let spec = if closed {
            let anchor = reward
                .anchor()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; policy.model.dim()]);
            Some(
                FinetuneSpec::new(policy.model.clone(), policy.eta, config.beta.unwrap_or(0.0), anchor)?
                    .with_reference(config.kl_reference),
            )
        } else {
            None
        };
        Ok(Self {
            policy: policy.clone(),
            config,
            reward,
            spec,
            velocity: vec![0.0; policy.theta.len()],
            start: Instant::now(),
        })
    }

    /// Gradient of `-beta KL(terminal(theta) || reference)`.
    fn kl_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let beta = self.config.beta.unwrap_or(0.0);
        let Some(spec) = self.spec.as_ref().filter(|_| beta > 0.0) else {
            return Ok(vec![0.0; theta.len()]);
        };
        let c = finetune::contraction(spec.kind(), spec.eta, spec.horizon())?;
        let law = finetune::terminal_law(spec.kind(), theta, spec.eta, spec.horizon())?;
        let reference = finetune::kl_reference_law(spec)?;
        let s2 = reference.covariance()[(0, 0)];
        Ok((0..theta.len())
            .map(|j| -beta * (c - 1.0) * (law.mean()[j] - reference.mean()[j]) / s2)
            .collect())
    }

    fn closed_gap(&self, theta: &[f64]) -> Result<f64> {
        match (&self.spec, self.reward.anchor()) {
            (Some(spec), Some(anchor)) => {
                let triple = finetune::process_triple(spec, theta)?;
                let j_sde = finetune::reward_expectation(&triple.sde_law, anchor)?;
                let j_ode = finetune::reward_expectation(&triple.ode_law, anchor)?;
                Ok((j_sde - j_ode).abs())
            }
            _ => Ok(f64::NAN),
        }
    }

    /// Mean reward of RK4 probability-flow samples sharing the rollouts' initial draws.
    fn ode_reward(&self, theta: &[f64], n: usize, seed: u64) -> Result<f64> {
        let score = ScoreModel::standard_gaussian(self.policy.model.dim())
            .with_control(Some(self.policy.control_with(theta.to_vec())))?;
        let batch = integrate_ode(&self.policy.model, &score, &self.policy.grid, n, seed, false, OdeMethod::Rk4)?;
        Ok(batch.samples().map(|x| self.reward.eval(x)).sum::<f64>() / n as f64)
    }

    fn row(&self, it: usize, theta: &[f64], batch: &RolloutGroup, j_ode: f64, grad: &[f64]) -> Result<TrainRow> {
        let (j_sde, se_sde) = crate::stats::mean_se(batch.rewards());
        Ok(TrainRow {
            iter: it,
            theta: theta.to_vec(),
            j_sde,
            se_sde,
            j_ode,
            gap: self.closed_gap(theta)?,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            seconds: self.start.elapsed().as_secs_f64(),
        })
    }

    fn ascend(&mut self, theta: &mut [f64], grad: &[f64], it: usize) -> Result<()> {
        let lr = self.config.learning_rate;
        for j in 0..theta.len() {
            let step = match self.config.optimizer {
                Optimizer::Sgd => grad[j],
                Optimizer::Momentum(mu) => {
                    self.velocity[j] = mu * self.velocity[j] + grad[j];
                    self.velocity[j]
                }
            };
            theta[j] += lr * step;
        }
        if theta.iter().any(|t| !(t.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::TrainingDiverged(it));
        }
        Ok(())
    }
}

/// REINFORCE training of `theta`; each iteration samples `batch_size` fresh
/// rollouts. The log has one row per iterate, including the final one.
pub fn ddpo_train(policy: &PolicySpec, config: &TrainConfig, reward: &Reward) -> Result<TrainLog> {
    let mut trainer = Trainer::new(policy, config, reward)?;
    let mut theta = policy.theta.clone();
    let mut rows = Vec::with_capacity(config.iterations + 1);
    let n = config.batch_size;
    for it in 0..=config.iterations {
        let seed = iteration_seed(config.seed, it);
        let current = trainer.policy.with_theta(theta.clone())?;
        let batch = rollout(&current, n, seed, reward)?;
        let mut grad = ddpo_gradient(&batch, &current, config.baseline)?;
        for (g, k) in grad.iter_mut().zip(trainer.kl_gradient(&theta)?) {
            *g += k;
        }
        let j_ode = trainer.ode_reward(&theta, n, seed)?;
        rows.push(trainer.row(it, &theta, &batch, j_ode, &grad)?);
        if it < config.iterations {
            trainer.ascend(&mut theta, &grad, it)?;
        }
    }
    Ok(TrainLog {
        theta,
        rows,
        skipped_groups: 0,
        max_advantage_mean_error: 0.0,
        max_advantage_std_error: 0.0,
        path_steps: (config.iterations + 1) * n * policy.grid.n_steps(),
    })
}

/// GRPO training: each iteration samples `groups_per_iter` groups of
/// `group_size` rollouts under the current `theta`, then takes `epochs`
/// gradient steps on the clipped surrogate. Degenerate groups are skipped.
pub fn grpo_train(policy: &PolicySpec, config: &TrainConfig, reward: &Reward) -> Result<TrainLog> {
    let mut trainer = Trainer::new(policy, config, reward)?;
    let mut theta = policy.theta.clone();
    let mut rows = Vec::with_capacity(config.iterations + 1);
    let g = config.group_size;
    let n = g * config.groups_per_iter;
    let (mut skipped, mut mean_err, mut std_err) = (0usize, 0.0f64, 0.0f64);
    for it in 0..=config.iterations {
        let seed = iteration_seed(config.seed, it);
        let current = trainer.policy.with_theta(theta.clone())?;
        let shared = config.shared_group_noise;
        let stream = move |i: usize| if shared { (i / g * g) as u64 } else { i as u64 };
        let all = rollout_streams(&current, n, seed, reward, &stream)?;
        let groups = all.split(g);
        for group in &groups {
            if let Ok(adv) = grpo_advantages(group.rewards()) {
                let k = adv.len() as f64;
                let m = adv.iter().sum::<f64>() / k;
                let s = (adv.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / k).sqrt();
                mean_err = mean_err.max(m.abs());
                std_err = std_err.max((s - 1.0).abs());
            }
        }
        let mut theta_new = theta.clone();
        let mut first_grad = None;
        for _ in 0..config.epochs {
            let sur = grpo_objective(&groups, &current, &theta_new, config.clip_eps)?;
            let mut grad = sur.gradient;
            for (gr, k) in grad.iter_mut().zip(trainer.kl_gradient(&theta_new)?) {
                *gr += k;
            }
            if first_grad.is_none() {
                skipped += sur.skipped_groups;
            }
            if it < config.iterations {
                trainer.ascend(&mut theta_new, &grad, it)?;
            }
            first_grad.get_or_insert(grad);
        }
        let grad = first_grad.expect("at least one epoch");
        let j_ode = trainer.ode_reward(&theta, n, seed)?;
        rows.push(trainer.row(it, &theta, &all, j_ode, &grad)?);
        if it < config.iterations {
            theta = theta_new;
        }
    }
    Ok(TrainLog {
        theta,
        rows,
        skipped_groups: skipped,
        max_advantage_mean_error: mean_err,
        max_advantage_std_error: std_err,
        path_steps: (config.iterations + 1) * n * policy.grid.n_steps(),
    })
}
