//! Forward diffusion models, exact scores and the linear-SDE Gaussian-law oracle.
//!
//! A model is the forward SDE `dX = f(t, X) dt + g(t) dB` on `[0, T]` with an
//! affine drift `f(t, x) = a(t) x + b(t)`. Two presets are provided:
//!
//! * VE: `a = 0`, `g(t) = sqrt(2t)`, so `N(0, 1)` data diffuses to `N(0, 1 + t^2)`.
//! * VP: `a(t) = -t`, `g(t) = sqrt(2t)`, which keeps `N(0, 1)` data at unit variance.
//!
//! Scores are evaluated in *forward* time; the samplers translate backward time
//! `t` into `T - t` before calling them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::laws::{GaussianLaw, MixtureLaw};
use crate::quadrature::Quadrature;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ve,
    Vp,
    GenericLinear,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Ve => "ve",
            ModelKind::Vp => "vp",
            ModelKind::GenericLinear => "linear",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Coefficients of `dX = (rate(t) X + offset(t)) dt + diffusion(t) dB`.
#[derive(Clone)]
pub struct LinearCoefficients {
    pub rate: ScalarFn,
    pub offset: ScalarFn,
    pub diffusion: ScalarFn,
}

impl LinearCoefficients {
    pub fn new(
        rate: impl Fn(f64) -> f64 + Send + Sync + 'static,
        offset: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            rate: Arc::new(rate),
            offset: Arc::new(offset),
            diffusion: Arc::new(diffusion),
        }
    }
}

#[derive(Clone)]
pub struct DiffusionModel {
    kind: ModelKind,
    horizon: f64,
    dim: usize,
    linear: Option<LinearCoefficients>,
    backward_prior: GaussianLaw,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("kind", &self.kind)
            .field("horizon", &self.horizon)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateHorizon)
    }
}

fn check_model_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::InvalidArgument("model dimension must be positive".into()))
    } else {
        Ok(())
    }
}

impl DiffusionModel {
    /// Variance-exploding preset; the backward sampler starts from `N(0, T^2 I)`.
    pub fn ve(horizon: f64, dim: usize) -> Result<Self> {
        check_horizon(horizon)?;
        check_model_dim(dim)?;
        let prior = GaussianLaw::isotropic(&vec![0.0; dim], horizon * horizon)?;
        Ok(Self {
            kind: ModelKind::Ve,
            horizon,
            dim,
            linear: None,
            backward_prior: prior,
        })
    }

    /// Variance-preserving preset; the backward sampler starts from `N(0, I)`.
    pub fn vp(horizon: f64, dim: usize) -> Result<Self> {
        check_horizon(horizon)?;
        check_model_dim(dim)?;
        Ok(Self {
            kind: ModelKind::Vp,
            horizon,
            dim,
            linear: None,
            backward_prior: GaussianLaw::standard(dim),
        })
    }

    /// Generic affine model. The diffusion coefficient is checked to be
    /// nonnegative and finite on a dense grid of `[0, T]`.
    pub fn generic_linear(
        coefficients: LinearCoefficients,
        horizon: f64,
        backward_prior: GaussianLaw,
    ) -> Result<Self> {
        check_horizon(horizon)?;
        let dim = backward_prior.dim();
        const PROBES: usize = 1024;
        for i in 0..=PROBES {
            let t = horizon * i as f64 / PROBES as f64;
            let g = (coefficients.diffusion)(t);
            let a = (coefficients.rate)(t);
            let b = (coefficients.offset)(t);
            if !(g.is_finite() && a.is_finite() && b.is_finite()) {
                return Err(Error::CoefficientBlowUp(t));
            }
            if g < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diffusion coefficient is negative at t = {t}"
                )));
            }
        }
        Ok(Self {
            kind: ModelKind::GenericLinear,
            horizon,
            dim,
            linear: Some(coefficients),
            backward_prior,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    /// Drift rate `a(t)` in `f(t, x) = a(t) x + b(t)`.
    #[inline]
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match self.kind {
            ModelKind::Ve => 0.0,
            ModelKind::Vp => -t,
            ModelKind::GenericLinear => (self.linear.as_ref().expect("generic coefficients").rate)(t),
        }
    }

    #[inline]
    pub fn drift_offset(&self, t: f64) -> f64 {
        match self.kind {
            ModelKind::Ve | ModelKind::Vp => 0.0,
            ModelKind::GenericLinear => {
                (self.linear.as_ref().expect("generic coefficients").offset)(t)
            }
        }
    }

    /// `g(t)`.
    #[inline]
    pub fn diffusion(&self, t: f64) -> f64 {
        match self.kind {
            ModelKind::Ve | ModelKind::Vp => (2.0 * t.max(0.0)).sqrt(),
            ModelKind::GenericLinear => {
                (self.linear.as_ref().expect("generic coefficients").diffusion)(t)
            }
        }
    }

    /// `g(t)^2`, exact for the presets (no square root round trip).
    #[inline]
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match self.kind {
            ModelKind::Ve | ModelKind::Vp => 2.0 * t.max(0.0),
            ModelKind::GenericLinear => {
                let g = self.diffusion(t);
                g * g
            }
        }
    }

    pub fn backward_prior(&self) -> &GaussianLaw {
        &self.backward_prior
    }
}

/// `-x / (t^2 + 1)`: exact VE score for `N(0, 1)` data.
pub fn ve_score(t: f64, x: &[f64]) -> Vec<f64> {
    let denom = t * t + 1.0;
    x.iter().map(|v| -v / denom).collect()
}

/// `-x`: exact VP score for `N(0, 1)` data at every time.
pub fn vp_score(_t: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| -v).collect()
}

/// Forward marginal of a Gaussian prior pushed through the model up to time `t`.
pub fn forward_marginal(model: &DiffusionModel, prior: &GaussianLaw, t: f64) -> Result<GaussianLaw> {
    check_dim(model.dim(), prior.dim())?;
    match model.kind() {
        ModelKind::Ve => {
            let d = prior.dim();
            let cov = prior.covariance() + DMatrix::from_diagonal_element(d, d, t * t);
            Ok(GaussianLaw::from_parts(prior.mean().clone(), cov))
        }
        ModelKind::Vp => {
            let (m, c) = vp_marginal_parts(prior.mean(), prior.covariance(), t);
            Ok(GaussianLaw::from_parts(m, c))
        }
        ModelKind::GenericLinear => {
            let a = |s: f64| model.drift_coeff(s);
            let b = |s: f64| model.drift_offset(s);
            let h = |s: f64| model.diffusion(s);
            linear_sde_law(&a, &b, &h, prior, t, &Quadrature::default())
        }
    }
}

/// VP marginal written as `I + (Sigma - I) e^{-t^2}` so that unit-variance
/// priors stay exactly at unit variance.
fn vp_marginal_parts(mean: &DVector<f64>, cov: &DMatrix<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = mean.len();
    let decay = (-t * t).exp();
    let identity = DMatrix::<f64>::identity(d, d);
    let c = &identity + (cov - &identity) * decay;
    (mean * (-0.5 * t * t).exp(), c)
}

#[inline]
fn vp_marginal_variance(prior_var: f64, t: f64) -> f64 {
    1.0 + (prior_var - 1.0) * (-t * t).exp()
}

/// Exact Gaussian law at time `t` of
/// `dZ = (a(s) Z + b(s)) ds + h(s) dB`, `Z_0 ~ init`, computed by adaptive
/// quadrature of the integrating factor.
pub fn linear_sde_law(
    a: &dyn Fn(f64) -> f64,
    b: &dyn Fn(f64) -> f64,
    h: &dyn Fn(f64) -> f64,
    init: &GaussianLaw,
    t: f64,
    quad: &Quadrature,
) -> Result<GaussianLaw> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    const PROBES: usize = 256;
    for i in 0..=PROBES {
        let s = t * i as f64 / PROBES as f64;
        if !(a(s).is_finite() && b(s).is_finite() && h(s).is_finite()) {
            return Err(Error::CoefficientBlowUp(s));
        }
    }
    let inner = Quadrature {
        abs_tol: (quad.abs_tol * 1e-3).max(1e-15),
        max_nodes: quad.max_nodes,
    };
    // log of the propagator from s to t
    let log_prop = |s: f64| inner.integrate(a, s, t);

    let decay = log_prop(0.0)?.exp();
    let mean_shift = quad.try_integrate(|s| Ok(log_prop(s)?.exp() * b(s)), 0.0, t)?;
    let noise_var = quad.try_integrate(
        |s| {
            let hs = h(s);
            Ok((2.0 * log_prop(s)?).exp() * hs * hs)
        },
        0.0,
        t,
    )?;

    let d = init.dim();
    let mean = init.mean() * decay + DVector::from_element(d, mean_shift);
    let cov = init.covariance() * (decay * decay) + DMatrix::from_diagonal_element(d, d, noise_var);
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::CoefficientBlowUp(t));
    }
    Ok(GaussianLaw::from_parts(mean, cov))
}

/// Learnable control applied to the argument of the pretrained score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    /// `s(t, x + theta)`.
    ConstantShift(Vec<f64>),
    /// `s(t, x + theta e^{-t^2 / 2})`, with `t` the forward time `T - t_backward`.
    DecayedShift(Vec<f64>),
}

impl Control {
    pub fn theta(&self) -> &[f64] {
        match self {
            Control::ConstantShift(th) | Control::DecayedShift(th) => th,
        }
    }

    /// Multiplier of `theta` at forward time `t`.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            Control::ConstantShift(_) => 1.0,
            Control::DecayedShift(_) => (-0.5 * t * t).exp(),
        }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        match self {
            Control::ConstantShift(_) => Control::ConstantShift(theta),
            Control::DecayedShift(_) => Control::DecayedShift(theta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreBase {
    /// Exact score of a Gaussian data law diffused by the model.
    ExactGaussian(GaussianLaw),
    /// Exact score of a Gaussian-mixture data law (VE and VP models only).
    ExactMixture(MixtureLaw),
    /// `s(t, x) = -x`.
    ExactVp,
    /// `s(t, x) = -slope * x + offset`, a parametrized score with known Lipschitz constant.
    Affine { slope: f64, offset: Vec<f64> },
}

/// Score oracle: an exact pretrained score optionally composed with a control.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    base: ScoreBase,
    control: Option<Control>,
    /// Per-coordinate prior variances when the Gaussian prior is diagonal.
    diag: Option<Vec<f64>>,
    /// Isotropic variance per mixture component, when every component is isotropic.
    iso: Option<Vec<f64>>,
}

impl ScoreModel {
    pub fn new(base: ScoreBase, control: Option<Control>) -> Result<Self> {
        if let (Some(dim), Some(c)) = (base_dim(&base), &control) {
            check_dim(dim, c.theta().len())?;
        }
        if let ScoreBase::Affine { slope, offset } = &base {
            if !slope.is_finite() || offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite affine score".into()));
            }
        }
        let diag = match &base {
            ScoreBase::ExactGaussian(g) if g.is_diagonal() => {
                Some((0..g.dim()).map(|i| g.covariance()[(i, i)]).collect())
            }
            _ => None,
        };
        let iso = match &base {
            ScoreBase::ExactMixture(m) => m
                .components()
                .iter()
                .map(|c| c.isotropic_variance())
                .collect::<Option<Vec<_>>>(),
            _ => None,
        };
        Ok(Self {
            base,
            control,
            diag,
            iso,
        })
    }

    pub fn exact(base: ScoreBase) -> Result<Self> {
        Self::new(base, None)
    }

    /// Exact score of `N(0, I)` data for the given model.
    pub fn standard_gaussian(dim: usize) -> Self {
        Self::new(ScoreBase::ExactGaussian(GaussianLaw::standard(dim)), None)
            .expect("standard gaussian score")
    }

    pub fn base(&self) -> &ScoreBase {
        &self.base
    }

    pub fn control(&self) -> Option<&Control> {
        self.control.as_ref()
    }

    pub fn with_control(&self, control: Option<Control>) -> Result<Self> {
        Self::new(self.base.clone(), control)
    }

    /// Dimension fixed by the score itself, if any.
    pub fn dim(&self) -> Option<usize> {
        base_dim(&self.base).or_else(|| self.control.as_ref().map(|c| c.theta().len()))
    }

    /// Writes `s(t, x)` (controlled if a control is attached) into `out`.
    #[inline]
    pub fn eval(&self, model: &DiffusionModel, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.control {
            None => self.eval_base(model, t, x, &[], 0.0, out),
            Some(c) => self.eval_base(model, t, x, c.theta(), c.weight(t), out),
        }
    }

    pub fn eval_vec(&self, model: &DiffusionModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.eval(model, t, x, &mut out)?;
        Ok(out)
    }

    /// When the score at forward time `t` is affine with a diagonal slope,
    /// writes `s(t, x) = -precision * x + intercept` coordinate-wise and returns
    /// `true`. Returns `false` (buffers untouched) for mixtures and full covariances.
    pub fn affine_form(
        &self,
        model: &DiffusionModel,
        t: f64,
        precision: &mut [f64],
        intercept: &mut [f64],
    ) -> Result<bool> {
        let d = precision.len();
        match &self.base {
            ScoreBase::ExactVp => {
                precision.iter_mut().for_each(|p| *p = 1.0);
                intercept.iter_mut().for_each(|q| *q = 0.0);
            }
            ScoreBase::Affine { slope, offset } => {
                check_dim(offset.len(), d)?;
                precision.iter_mut().for_each(|p| *p = *slope);
                intercept.copy_from_slice(offset);
            }
            ScoreBase::ExactGaussian(prior) => {
                check_dim(prior.dim(), d)?;
                let Some(vars) = &self.diag else {
                    return Ok(false);
                };
                let (mean_scale, var_of): (f64, &dyn Fn(f64) -> f64) = match model.kind() {
                    ModelKind::Ve => (1.0, &|v: f64| v + t * t),
                    ModelKind::Vp => ((-0.5 * t * t).exp(), &|v: f64| vp_marginal_variance(v, t)),
                    ModelKind::GenericLinear => return Ok(false),
                };
                for i in 0..d {
                    let v = var_of(vars[i]);
                    if v <= 0.0 {
                        return Err(Error::SingularCovariance);
                    }
                    precision[i] = 1.0 / v;
                    intercept[i] = prior.mean()[i] * mean_scale / v;
                }
            }
            ScoreBase::ExactMixture(_) => return Ok(false),
        }
        if let Some(c) = &self.control {
            let w = c.weight(t);
            for (i, th) in c.theta().iter().enumerate() {
                intercept[i] -= precision[i] * w * th;
            }
        }
        Ok(true)
    }

    /// Evaluates the base score at `x + weight * shift` (an empty shift means none).
    fn eval_base(
        &self,
        model: &DiffusionModel,
        t: f64,
        x: &[f64],
        shift: &[f64],
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let arg = |i: usize| {
            if shift.is_empty() {
                x[i]
            } else {
                x[i] + weight * shift[i]
            }
        };
        match &self.base {
            ScoreBase::ExactVp => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -arg(i);
                }
                Ok(())
            }
            ScoreBase::Affine { slope, offset } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -slope * arg(i) + offset[i];
                }
                Ok(())
            }
            ScoreBase::ExactGaussian(prior) => {
                check_dim(prior.dim(), x.len())?;
                match (&self.diag, model.kind()) {
                    (Some(vars), ModelKind::Ve) => {
                        let t2 = t * t;
                        for (i, o) in out.iter_mut().enumerate() {
                            let v = vars[i] + t2;
                            if v <= 0.0 {
                                return Err(Error::SingularCovariance);
                            }
                            *o = -(arg(i) - prior.mean()[i]) / v;
                        }
                        Ok(())
                    }
                    (Some(vars), ModelKind::Vp) => {
                        let mean_scale = (-0.5 * t * t).exp();
                        for (i, o) in out.iter_mut().enumerate() {
                            let v = vp_marginal_variance(vars[i], t);
                            if v <= 0.0 {
                                return Err(Error::SingularCovariance);
                            }
                            *o = -(arg(i) - prior.mean()[i] * mean_scale) / v;
                        }
                        Ok(())
                    }
                    _ => {
                        let law = forward_marginal(model, prior, t)?;
                        let chol = law.cholesky()?;
                        let diff = DVector::from_fn(x.len(), |i, _| arg(i) - law.mean()[i]);
                        let s = -chol.solve(&diff);
                        out.copy_from_slice(s.as_slice());
                        Ok(())
                    }
                }
            }
            ScoreBase::ExactMixture(prior) => {
                check_dim(prior.dim(), x.len())?;
                match &self.iso {
                    Some(vars) => isotropic_mixture_score(prior, vars, model, t, &arg, out),
                    None => {
                        let xs: Vec<f64> = (0..x.len()).map(arg).collect();
                        let s = full_mixture_score(prior, model, t, &xs)?;
                        out.copy_from_slice(&s);
                        Ok(())
                    }
                }
            }
        }
    }
}

fn base_dim(base: &ScoreBase) -> Option<usize> {
    match base {
        ScoreBase::ExactGaussian(g) => Some(g.dim()),
        ScoreBase::ExactMixture(m) => Some(m.dim()),
        ScoreBase::Affine { offset, .. } => Some(offset.len()),
        ScoreBase::ExactVp => None,
    }
}

/// Mean scale and additive variance of a forward-diffused component at time `t`.
fn mixture_transform(model: &DiffusionModel, t: f64) -> Result<(f64, f64, f64)> {
    match model.kind() {
        // (mean scale, covariance scale, added isotropic variance)
        ModelKind::Ve => Ok((1.0, 1.0, t * t)),
        ModelKind::Vp => {
            let decay = (-t * t).exp();
            Ok(((-0.5 * t * t).exp(), decay, 1.0 - decay))
        }
        ModelKind::GenericLinear => Err(Error::InvalidArgument(
            "mixture scores are only defined for VE and VP models".into(),
        )),
    }
}

/// Responsibility-weighted component scores; responsibilities use a
/// max-subtracted softmax of the component log-densities.
fn isotropic_mixture_score(
    prior: &MixtureLaw,
    vars: &[f64],
    model: &DiffusionModel,
    t: f64,
    arg: &dyn Fn(usize) -> f64,
    out: &mut [f64],
) -> Result<()> {
    let (mean_scale, cov_scale, added) = mixture_transform(model, t)?;
    let d = out.len();
    let log_weight = |k: usize, comp: &GaussianLaw| -> Result<(f64, f64)> {
        let v = if model.kind() == ModelKind::Vp {
            1.0 + (vars[k] - 1.0) * cov_scale
        } else {
            vars[k] * cov_scale + added
        };
        if v <= 0.0 {
            return Err(Error::SingularComponent(k));
        }
        let mut sq = 0.0;
        for i in 0..d {
            let r = arg(i) - comp.mean()[i] * mean_scale;
            sq += r * r;
        }
        let lw = prior.weights()[k].ln() - 0.5 * d as f64 * v.ln() - 0.5 * sq / v;
        Ok((lw, v))
    };

    let mut max_lw = f64::NEG_INFINITY;
    for (k, comp) in prior.components().iter().enumerate() {
        max_lw = max_lw.max(log_weight(k, comp)?.0);
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut norm = 0.0;
    for (k, comp) in prior.components().iter().enumerate() {
        let (lw, v) = log_weight(k, comp)?;
        let w = (lw - max_lw).exp();
        norm += w;
        for (i, o) in out.iter_mut().enumerate() {
            *o -= w * (arg(i) - comp.mean()[i] * mean_scale) / v;
        }
    }
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(())
}

fn full_mixture_score(prior: &MixtureLaw, model: &DiffusionModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (mean_scale, cov_scale, added) = mixture_transform(model, t)?;
    let d = x.len();
    let xv = DVector::from_column_slice(x);
    let mut logs = Vec::with_capacity(prior.len());
    let mut scores = Vec::with_capacity(prior.len());
    for (k, (w, comp)) in prior.weights().iter().zip(prior.components()).enumerate() {
        let cov = if model.kind() == ModelKind::Vp {
            let identity = DMatrix::<f64>::identity(d, d);
            &identity + (comp.covariance() - &identity) * cov_scale
        } else {
            comp.covariance() * cov_scale + DMatrix::from_diagonal_element(d, d, added)
        };
        let chol = nalgebra::Cholesky::new(cov).ok_or(Error::SingularComponent(k))?;
        let diff = &xv - comp.mean() * mean_scale;
        let solved = chol.solve(&diff);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        logs.push(w.ln() - 0.5 * (log_det + diff.dot(&solved)));
        scores.push(-solved);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = resp.iter().sum();
    let mut out = DVector::zeros(d);
    for (r, s) in resp.iter().zip(&scores) {
        out += s * (*r / norm);
    }
    Ok(out.as_slice().to_vec())
}

/// `grad log p_t(x)` for mixture data diffused by a VE or VP model.
pub fn mixture_score(t: f64, x: &[f64], prior: &MixtureLaw, model: &DiffusionModel) -> Result<Vec<f64>> {
    let score = ScoreModel::exact(ScoreBase::ExactMixture(prior.clone()))?;
    score.eval_vec(model, t, x)
}

/// Log-density of the forward-diffused mixture at time `t`.
pub fn mixture_log_density(t: f64, x: &[f64], prior: &MixtureLaw, model: &DiffusionModel) -> Result<f64> {
    let (mean_scale, cov_scale, added) = mixture_transform(model, t)?;
    let d = prior.dim();
    let comps = prior
        .components()
        .iter()
        .map(|c| {
            let cov = if model.kind() == ModelKind::Vp {
                let identity = DMatrix::<f64>::identity(d, d);
                &identity + (c.covariance() - &identity) * cov_scale
            } else {
                c.covariance() * cov_scale + DMatrix::from_diagonal_element(d, d, added)
            };
            GaussianLaw::new(c.mean() * mean_scale, cov)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureLaw::new(prior.weights().to_vec(), comps)?.log_density(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ve1(t: f64) -> DiffusionModel {
        DiffusionModel::ve(t, 1).unwrap()
    }

    #[test]
    fn ve_score_examples() {
        assert_eq!(ve_score(0.0, &[1.0]), vec![-1.0]);
        assert_eq!(ve_score(7.3, &[0.0]), vec![-0.0]);
        assert_eq!(ve_score(1.0, &[2.0]), vec![-1.0]);
    }

    #[test]
    fn vp_score_examples() {
        assert_eq!(vp_score(0.5, &[3.0]), vec![-3.0]);
        assert_eq!(vp_score(0.5, &[0.0]), vec![-0.0]);
    }

    #[test]
    fn vp_backward_drift_from_score_matches_reference_dynamic() {
        // -f(tau, y) + (1 + eta^2)/2 g^2(tau) s(y) with eta = 1 and tau = T - t = 2
        let model = DiffusionModel::vp(5.0, 1).unwrap();
        let tau = 2.0;
        let y = 0.7;
        let drift = -(model.drift_coeff(tau) * y) + model.diffusion_sq(tau) * vp_score(tau, &[y])[0];
        // reference: -eta^2 (T - t) y
        assert!((drift - (-2.0 * y)).abs() < 1e-15);
    }

    #[test]
    fn presets_have_exact_drift_rates() {
        let ve = ve1(3.0);
        let vp = DiffusionModel::vp(3.0, 1).unwrap();
        for t in [0.0, 0.3, 1.7, 3.0] {
            assert_eq!(ve.drift_coeff(t), 0.0);
            assert_eq!(vp.drift_coeff(t), -t);
            assert!(ve.diffusion(t) >= 0.0);
        }
    }

    #[test]
    fn generic_model_rejects_negative_diffusion() {
        let coeffs = LinearCoefficients::new(|_| 0.0, |_| 0.0, |t| 1.0 - t);
        let err = DiffusionModel::generic_linear(coeffs, 2.0, GaussianLaw::standard(1)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn forward_marginal_examples() {
        let prior = GaussianLaw::standard(1);
        let ve = ve1(5.0);
        let m0 = forward_marginal(&ve, &prior, 0.0).unwrap();
        assert_eq!(m0.variance_scalar(), 1.0);
        let m3 = forward_marginal(&ve, &prior, 3.0).unwrap();
        assert_eq!(m3.variance_scalar(), 10.0);
        assert_eq!(m3.mean_scalar(), 0.0);
        let vp = DiffusionModel::vp(5.0, 1).unwrap();
        for t in [0.0, 0.5, 2.0, 4.9] {
            assert_eq!(forward_marginal(&vp, &prior, t).unwrap().variance_scalar(), 1.0);
        }
    }

    #[test]
    fn generic_forward_marginal_uses_quadrature() {
        // Generic copy of VE: marginal variance 1 + t^2
        let coeffs = LinearCoefficients::new(|_| 0.0, |_| 0.0, |t: f64| (2.0 * t).sqrt());
        let model = DiffusionModel::generic_linear(coeffs, 3.0, GaussianLaw::standard(1)).unwrap();
        let m = forward_marginal(&model, &GaussianLaw::standard(1), 3.0).unwrap();
        assert!((m.variance_scalar() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_linear_dynamics_keep_initial_law() {
        let init = GaussianLaw::scalar(0.4, 2.5).unwrap();
        let zero = |_: f64| 0.0;
        let law = linear_sde_law(&zero, &zero, &zero, &init, 3.7, &Quadrature::default()).unwrap();
        assert_eq!(law.mean_scalar(), 0.4);
        assert_eq!(law.variance_scalar(), 2.5);
    }

    #[test]
    fn linear_sde_law_reports_blow_up() {
        let zero = |_: f64| 0.0;
        let bad = |s: f64| 1.0 / (s - 1.0);
        let err = linear_sde_law(&bad, &zero, &zero, &GaussianLaw::standard(1), 2.0, &Quadrature::default())
            .unwrap_err();
        assert!(matches!(err, Error::CoefficientBlowUp(_)));
    }

    #[test]
    fn ornstein_uhlenbeck_law_matches_closed_form() {
        // dZ = (-k Z + c) dt + s dB
        let (k, c, s) = (1.3, 0.4, 0.7);
        let init = GaussianLaw::scalar(2.0, 0.5).unwrap();
        let a = move |_: f64| -k;
        let b = move |_: f64| c;
        let h = move |_: f64| s;
        let t = 2.2;
        let law = linear_sde_law(&a, &b, &h, &init, t, &Quadrature::default()).unwrap();
        let e = (-k * t).exp();
        let mean = 2.0 * e + c / k * (1.0 - e);
        let var = 0.5 * e * e + s * s / (2.0 * k) * (1.0 - e * e);
        assert!((law.mean_scalar() - mean).abs() < 1e-10);
        assert!((law.variance_scalar() - var).abs() < 1e-10);
    }

    #[test]
    fn single_component_mixture_collapses_to_gaussian_score() {
        let mix = MixtureLaw::isotropic(vec![1.0], &[vec![0.0]], &[1.0]).unwrap();
        let model = ve1(4.0);
        for (t, x) in [(0.0, 1.0), (0.5, -2.0), (3.0, 0.7)] {
            let s = mixture_score(t, &[x], &mix, &model).unwrap()[0];
            assert!((s - ve_score(t, &[x])[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let mix = MixtureLaw::isotropic(vec![0.5, 0.5], &[vec![-1.0], vec![1.0]], &[1.0, 1.0]).unwrap();
        let s = mixture_score(0.8, &[0.0], &mix, &ve1(2.0)).unwrap()[0];
        assert_eq!(s, 0.0);
    }

    #[test]
    fn singular_component_at_time_zero_is_rejected() {
        let mix = MixtureLaw::isotropic(vec![0.5, 0.5], &[vec![-1.0], vec![1.0]], &[0.0, 1.0]).unwrap();
        let err = mixture_score(0.0, &[0.3], &mix, &ve1(2.0)).unwrap_err();
        assert_eq!(err, Error::SingularComponent(0));
        assert!(mixture_score(0.1, &[0.3], &mix, &ve1(2.0)).is_ok());
    }

    #[test]
    fn full_and_isotropic_mixture_paths_agree() {
        let mix_iso =
            MixtureLaw::isotropic(vec![0.3, 0.7], &[vec![1.0, 0.0], vec![-0.5, 0.2]], &[1.0, 2.0]).unwrap();
        // same law, but with a covariance the fast path does not recognise
        let comps = mix_iso
            .components()
            .iter()
            .map(|c| {
                let mut cov = c.covariance().clone();
                cov[(0, 1)] = 1e-300;
                cov[(1, 0)] = 1e-300;
                GaussianLaw::new(c.mean().clone(), cov).unwrap()
            })
            .collect();
        let mix_full = MixtureLaw::new(vec![0.3, 0.7], comps).unwrap();
        let model = DiffusionModel::vp(3.0, 2).unwrap();
        let x = [0.4, -1.1];
        let a = mixture_score(0.9, &x, &mix_iso, &model).unwrap();
        let b = mixture_score(0.9, &x, &mix_full, &model).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn controls_shift_the_score_argument() {
        let model = ve1(3.0);
        let base = ScoreModel::standard_gaussian(1);
        let shifted = base
            .with_control(Some(Control::ConstantShift(vec![0.5])))
            .unwrap();
        let s = shifted.eval_vec(&model, 1.0, &[1.0]).unwrap()[0];
        assert_eq!(s, -1.5 / 2.0);
        let decayed = ScoreModel::new(ScoreBase::ExactVp, Some(Control::DecayedShift(vec![2.0]))).unwrap();
        let s = decayed.eval_vec(&model, 2.0, &[0.0]).unwrap()[0];
        assert!((s + 2.0 * (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn affine_form_agrees_with_pointwise_evaluation() {
        let prior = GaussianLaw::new(
            DVector::from_column_slice(&[0.3, -1.0]),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 0.5])),
        )
        .unwrap();
        let x = [0.7, 1.9];
        for model in [DiffusionModel::ve(4.0, 2).unwrap(), DiffusionModel::vp(4.0, 2).unwrap()] {
            for control in [
                None,
                Some(Control::ConstantShift(vec![0.4, -0.2])),
                Some(Control::DecayedShift(vec![-1.0, 2.0])),
            ] {
                let score = ScoreModel::new(ScoreBase::ExactGaussian(prior.clone()), control).unwrap();
                for t in [0.0, 0.6, 2.5] {
                    let (mut p, mut q) = ([0.0; 2], [0.0; 2]);
                    assert!(score.affine_form(&model, t, &mut p, &mut q).unwrap());
                    let s = score.eval_vec(&model, t, &x).unwrap();
                    for i in 0..2 {
                        assert!((s[i] - (-p[i] * x[i] + q[i])).abs() < 1e-14);
                    }
                }
            }
        }
        let mix = MixtureLaw::isotropic(vec![1.0], &[vec![0.0]], &[1.0]).unwrap();
        let score = ScoreModel::exact(ScoreBase::ExactMixture(mix)).unwrap();
        let (mut p, mut q) = ([0.0], [0.0]);
        assert!(!score.affine_form(&ve1(1.0), 0.5, &mut p, &mut q).unwrap());
    }

    #[test]
    fn control_dimension_must_match() {
        let err = ScoreModel::new(
            ScoreBase::ExactGaussian(GaussianLaw::standard(2)),
            Some(Control::ConstantShift(vec![1.0])),
        )
        .unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, got: 1 });
    }
}
