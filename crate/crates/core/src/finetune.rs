//! Closed-form fine-tuning of the Gaussian toy models.
//!
//! With pretrained data `N(0, I)` and the control entering through the score
//! argument, every terminal law is Gaussian. Writing `c` for the contraction
//!
//! * VE: `c = (1 + T^2)^{-(1 + eta^2) / 2}`
//! * VP: `c = e^{-(1 + eta^2) T^2 / 2}`
//!
//! the controlled terminal law is `N(theta (c - 1), 1 - c^2)` (VE) or
//! `N(theta (c - 1), 1)` (VP), coordinate-wise. The probability-flow ODE keeps
//! `theta` and uses `eta = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Control, DiffusionModel, ModelKind};
use crate::error::{check_dim, Error, Result};
use crate::laws::GaussianLaw;

/// Law the terminal-law KL regularizer is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    /// The pretrained data law `N(0, I)`, which the uncontrolled sampler
    /// reproduces as `T` grows. The closed-form optimizers maximize this objective.
    #[default]
    DataLaw,
    /// The finite-horizon terminal law of the uncontrolled process.
    RefTerminal,
}

#[derive(Debug, Clone)]
pub struct FinetuneSpec {
    pub model: DiffusionModel,
    pub eta: f64,
    pub beta: f64,
    pub anchor: Vec<f64>,
    pub kl_reference: KlReference,
}

impl FinetuneSpec {
    pub fn new(model: DiffusionModel, eta: f64, beta: f64, anchor: Vec<f64>) -> Result<Self> {
        if !matches!(model.kind(), ModelKind::Ve | ModelKind::Vp) {
            return Err(Error::InvalidArgument(
                "closed-form fine-tuning needs a VE or VP model".into(),
            ));
        }
        check_eta(eta)?;
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
        }
        check_dim(model.dim(), anchor.len())?;
        Ok(Self {
            model,
            eta,
            beta,
            anchor,
            kl_reference: KlReference::default(),
        })
    }

    /// One-dimensional VE spec with anchor 1.
    pub fn ve(eta: f64, beta: f64, horizon: f64) -> Result<Self> {
        Self::new(DiffusionModel::ve(horizon, 1)?, eta, beta, vec![1.0])
    }

    /// One-dimensional VP spec with anchor 1.
    pub fn vp(eta: f64, beta: f64, horizon: f64) -> Result<Self> {
        Self::new(DiffusionModel::vp(horizon, 1)?, eta, beta, vec![1.0])
    }

    pub fn with_reference(mut self, reference: KlReference) -> Self {
        self.kl_reference = reference;
        self
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn horizon(&self) -> f64 {
        self.model.horizon()
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Control form whose closed forms this module implements: a constant shift
    /// for VE and a time-decayed shift for VP.
    pub fn control(&self, theta: Vec<f64>) -> Control {
        match self.kind() {
            ModelKind::Vp => Control::DecayedShift(theta),
            _ => Control::ConstantShift(theta),
        }
    }
}

/// Terminal laws of the reference, fine-tuned SDE and fine-tuned ODE processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessTriple {
    pub ref_law: GaussianLaw,
    pub sde_law: GaussianLaw,
    pub ode_law: GaussianLaw,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_finite() && eta >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eta must be nonnegative, got {eta}")))
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateHorizon)
    }
}

/// Mean contraction `c` of the controlled terminal law (see module docs).
pub fn contraction(kind: ModelKind, eta: f64, horizon: f64) -> Result<f64> {
    check_eta(eta)?;
    check_horizon(horizon)?;
    let e = 1.0 + eta * eta;
    match kind {
        ModelKind::Ve => Ok((1.0 + horizon * horizon).powf(-0.5 * e)),
        ModelKind::Vp => Ok((-0.5 * e * horizon * horizon).exp()),
        ModelKind::GenericLinear => Err(Error::InvalidArgument(
            "no closed form for generic linear models".into(),
        )),
    }
}

/// `-||x - anchor||^2`.
pub fn quadratic_reward(x: &[f64], anchor: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), anchor.len());
    -x.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// `E[-||X - anchor||^2] = -(tr Sigma + ||mu - anchor||^2)`.
pub fn reward_expectation(law: &GaussianLaw, anchor: &[f64]) -> Result<f64> {
    check_dim(law.dim(), anchor.len())?;
    let dist_sq: f64 = law.mean().iter().zip(anchor).map(|(m, a)| (m - a) * (m - a)).sum();
    Ok(-(law.trace() + dist_sq))
}

/// `KL(p || q)` between Gaussian laws; infinite when `p` is singular and `q` is not.
pub fn gaussian_kl(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    check_dim(q.dim(), p.dim())?;
    if p.dim() == 1 {
        let (vp, vq) = (p.variance_scalar(), q.variance_scalar());
        if vq <= 0.0 {
            return Err(Error::SingularCovariance);
        }
        if vp <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let dm = p.mean_scalar() - q.mean_scalar();
        let kl = 0.5 * (vq / vp).ln() + (vp + dm * dm) / (2.0 * vq) - 0.5;
        return Ok(kl.max(0.0));
    }
    let chol_q = q.cholesky()?;
    let log_det_q = 2.0 * chol_q.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_p = match p.cholesky() {
        Ok(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        Err(_) => return Ok(f64::INFINITY),
    };
    let d = p.dim();
    let trace_term = chol_q.solve(p.covariance()).trace();
    let dm: DVector<f64> = q.mean() - p.mean();
    let maha = dm.dot(&chol_q.solve(&dm));
    let kl = 0.5 * (trace_term + maha - d as f64 + log_det_q - log_det_p);
    Ok(kl.max(0.0))
}

fn isotropic_law(mean: DVector<f64>, variance: f64) -> GaussianLaw {
    let d = mean.len();
    GaussianLaw::from_parts(mean, DMatrix::from_diagonal_element(d, d, variance))
}

/// Terminal law of the controlled process with the closed form of `kind`.
pub fn terminal_law(kind: ModelKind, theta: &[f64], eta: f64, horizon: f64) -> Result<GaussianLaw> {
    let c = contraction(kind, eta, horizon)?;
    let variance = match kind {
        ModelKind::Ve => 1.0 - c * c,
        _ => 1.0,
    };
    let mean = DVector::from_iterator(theta.len(), theta.iter().map(|t| t * (c - 1.0)));
    Ok(isotropic_law(mean, variance))
}

/// `N(theta (1+T^2)^{-(1+eta^2)/2} - theta, 1 - (1+T^2)^{-(1+eta^2)})`.
pub fn terminal_law_ve(theta: f64, eta: f64, horizon: f64) -> Result<GaussianLaw> {
    terminal_law(ModelKind::Ve, &[theta], eta, horizon)
}

/// `N(theta e^{-(1+eta^2) T^2 / 2} - theta, 1)`.
pub fn terminal_law_vp(theta: f64, eta: f64, horizon: f64) -> Result<GaussianLaw> {
    terminal_law(ModelKind::Vp, &[theta], eta, horizon)
}

/// The law the KL term is measured against.
pub fn kl_reference_law(spec: &FinetuneSpec) -> Result<GaussianLaw> {
    match spec.kl_reference {
        KlReference::DataLaw => Ok(GaussianLaw::standard(spec.dim())),
        KlReference::RefTerminal => terminal_law(spec.kind(), &vec![0.0; spec.dim()], spec.eta, spec.horizon()),
    }
}

/// `F(theta) = E[r(Y_T^theta)] - beta KL(Y_T^theta || reference)` for a control
/// vector (one entry per coordinate).
pub fn objective(theta: &[f64], spec: &FinetuneSpec) -> Result<f64> {
    check_dim(spec.dim(), theta.len())?;
    let law = terminal_law(spec.kind(), theta, spec.eta, spec.horizon())?;
    let kl = if spec.beta == 0.0 {
        0.0
    } else {
        gaussian_kl(&law, &kl_reference_law(spec)?)?
    };
    Ok(reward_expectation(&law, &spec.anchor)? - spec.beta * kl)
}

/// One-dimensional objective `F(theta)`.
pub fn objective_f(theta: f64, spec: &FinetuneSpec) -> Result<f64> {
    objective(&[theta], spec)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")))
    }
}

/// `-[(1 + beta/2)(1 - c)]^{-1}` for anchor 1.
fn optimal_theta(kind: ModelKind, eta: f64, beta: f64, horizon: f64) -> Result<f64> {
    check_beta(beta)?;
    let c = contraction(kind, eta, horizon)?;
    let denom = (1.0 + 0.5 * beta) * (1.0 - c);
    if denom <= 0.0 {
        return Err(Error::DegenerateHorizon);
    }
    Ok(-1.0 / denom)
}

pub fn optimal_theta_ve(eta: f64, beta: f64, horizon: f64) -> Result<f64> {
    optimal_theta(ModelKind::Ve, eta, beta, horizon)
}

pub fn optimal_theta_vp(eta: f64, beta: f64, horizon: f64) -> Result<f64> {
    optimal_theta(ModelKind::Vp, eta, beta, horizon)
}

/// Scalar optimum for anchor 1 under the spec's model.
pub fn optimal_theta_for(spec: &FinetuneSpec) -> Result<f64> {
    optimal_theta(spec.kind(), spec.eta, spec.beta, spec.horizon())
}

/// Optimal control vector `theta* r`; each coordinate decouples, so the scalar
/// optimum scales linearly with the anchor.
pub fn optimal_control(spec: &FinetuneSpec) -> Result<Vec<f64>> {
    let t = optimal_theta_for(spec)?;
    Ok(spec.anchor.iter().map(|r| t * r).collect())
}

/// Exact terminal laws of `Y^REF` (no control), `Y^SDE` (control `theta`,
/// stochasticity `eta`) and `Y^ODE` (same `theta`, `eta = 0`).
pub fn process_triple(spec: &FinetuneSpec, theta: &[f64]) -> Result<ProcessTriple> {
    check_dim(spec.dim(), theta.len())?;
    let (kind, eta, t) = (spec.kind(), spec.eta, spec.horizon());
    Ok(ProcessTriple {
        ref_law: terminal_law(kind, &vec![0.0; theta.len()], eta, t)?,
        sde_law: terminal_law(kind, theta, eta, t)?,
        ode_law: terminal_law(kind, theta, 0.0, t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(quadratic_reward(&[1.0], &[1.0]), 0.0);
        assert_eq!(quadratic_reward(&[0.0], &[1.0]), -1.0);
        assert_eq!(quadratic_reward(&[0.0, 0.0], &[0.0, 1.0]), -1.0);
    }

    #[test]
    fn reward_expectation_examples() {
        let point = GaussianLaw::scalar(1.0, 0.0).unwrap();
        assert_eq!(reward_expectation(&point, &[1.0]).unwrap(), 0.0);
        assert_eq!(reward_expectation(&GaussianLaw::standard(1), &[1.0]).unwrap(), -2.0);
        let law = GaussianLaw::scalar(0.5, 0.99).unwrap();
        assert!((reward_expectation(&law, &[1.0]).unwrap() + 1.24).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let std = GaussianLaw::standard(1);
        assert_eq!(gaussian_kl(&std, &std).unwrap(), 0.0);
        let shifted = GaussianLaw::scalar(1.0, 1.0).unwrap();
        assert!((gaussian_kl(&shifted, &std).unwrap() - 0.5).abs() < 1e-15);
        let wide = GaussianLaw::scalar(0.0, 4.0).unwrap();
        let expected = 0.5f64.ln() + 2.0 - 0.5;
        assert!((gaussian_kl(&wide, &std).unwrap() - expected).abs() < 1e-15);
        let point = GaussianLaw::scalar(0.0, 0.0).unwrap();
        assert_eq!(gaussian_kl(&point, &std).unwrap(), f64::INFINITY);
        assert_eq!(gaussian_kl(&std, &point).unwrap_err(), Error::SingularCovariance);
    }

    #[test]
    fn multivariate_kl_matches_sum_of_marginals_for_diagonal_laws() {
        let p = GaussianLaw::new(
            DVector::from_column_slice(&[0.3, -1.0]),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 0.5])),
        )
        .unwrap();
        let q = GaussianLaw::isotropic(&[0.0, 0.5], 1.5).unwrap();
        let sum = gaussian_kl(&GaussianLaw::scalar(0.3, 2.0).unwrap(), &GaussianLaw::scalar(0.0, 1.5).unwrap())
            .unwrap()
            + gaussian_kl(&GaussianLaw::scalar(-1.0, 0.5).unwrap(), &GaussianLaw::scalar(0.5, 1.5).unwrap())
                .unwrap();
        assert!((gaussian_kl(&p, &q).unwrap() - sum).abs() < 1e-14);
    }

    #[test]
    fn terminal_law_examples() {
        let law = terminal_law_ve(-1.0, 1.0, 3.0).unwrap();
        assert!((law.mean_scalar() - 0.9).abs() < 1e-15);
        assert!((law.variance_scalar() - 0.99).abs() < 1e-15);
        let vp = terminal_law_vp(-0.5, 1.0, 1.0).unwrap();
        assert!((vp.mean_scalar() - (0.5 - 0.5 * (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(vp.variance_scalar(), 1.0);
        assert_eq!(terminal_law_vp(0.0, 2.0, 3.0).unwrap(), GaussianLaw::standard(1));
        assert!(terminal_law_ve(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn optimal_theta_examples() {
        assert!((optimal_theta_ve(1.0, 2.0, 3.0).unwrap() + 5.0 / 9.0).abs() < 1e-15);
        let vp = optimal_theta_vp(1.0, 2.0, 2.0).unwrap();
        assert!((vp + 1.0 / (2.0 * (1.0 - (-4.0f64).exp()))).abs() < 1e-15);
        assert!((vp + 0.5093).abs() < 1e-4);
        // e^{-T^2/2} at eta = 0 is still 1.1e-2 at T = 3; the eta dependence
        // drops below 1e-6 only around T = 6.
        let gap = |t: f64| optimal_theta_vp(0.0, 2.0, t).unwrap() - optimal_theta_vp(1.5, 2.0, t).unwrap();
        assert!((gap(3.0) + 0.5 * (-4.5f64).exp() / (1.0 - (-4.5f64).exp())).abs() < 1e-6);
        assert!(gap(6.0).abs() < 1e-6);
        assert!((optimal_theta_ve(1.0, 0.0, 1e9).unwrap() + 1.0).abs() < 1e-9);
        let t: Vec<f64> = [1.0, 3.0, 10.0].iter().map(|t| optimal_theta_ve(1.0, 2.0, *t).unwrap()).collect();
        assert!(t[0] < t[1] && t[1] < t[2]);
        assert_eq!(optimal_theta_ve(1.0, 2.0, 0.0).unwrap_err(), Error::DegenerateHorizon);
    }

    #[test]
    fn sde_mean_at_optimum_is_shrunk_anchor() {
        for (kind, t) in [(ModelKind::Ve, 3.0), (ModelKind::Vp, 3.0), (ModelKind::Ve, 10.0)] {
            for beta in [0.5, 2.0, 7.0] {
                let theta = optimal_theta(kind, 1.2, beta, t).unwrap();
                let law = terminal_law(kind, &[theta], 1.2, t).unwrap();
                assert!((law.mean_scalar() - 1.0 / (1.0 + beta / 2.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_at_zero_control_with_terminal_reference_is_reference_reward() {
        let spec = FinetuneSpec::ve(1.0, 2.0, 3.0).unwrap().with_reference(KlReference::RefTerminal);
        let reference = terminal_law_ve(0.0, 1.0, 3.0).unwrap();
        assert_eq!(
            objective_f(0.0, &spec).unwrap(),
            reward_expectation(&reference, &[1.0]).unwrap()
        );
    }

    #[test]
    fn objective_is_maximized_at_optimum() {
        let spec = FinetuneSpec::ve(1.0, 2.0, 3.0).unwrap();
        let star = optimal_theta_for(&spec).unwrap();
        let f = objective_f(star, &spec).unwrap();
        assert!(f > objective_f(star + 0.1, &spec).unwrap());
        assert!(f > objective_f(star - 0.1, &spec).unwrap());
    }

    #[test]
    fn process_triple_ode_law_keeps_theta() {
        let spec = FinetuneSpec::ve(1.2, 2.0, 10.0).unwrap();
        let star = optimal_theta_for(&spec).unwrap();
        let triple = process_triple(&spec, &[star]).unwrap();
        let t2 = 101.0f64;
        assert!((triple.ode_law.mean_scalar() - star * (t2.powf(-0.5) - 1.0)).abs() < 1e-15);
        assert!((triple.ode_law.variance_scalar() - (1.0 - 1.0 / t2)).abs() < 1e-15);
        assert_eq!(triple.ref_law.mean_scalar(), 0.0);
    }

    #[test]
    fn optimal_control_scales_with_anchor() {
        let model = DiffusionModel::ve(10.0, 2).unwrap();
        let spec = FinetuneSpec::new(model, 1.2, 2.0, vec![0.0, 2.0]).unwrap();
        let star = optimal_theta_ve(1.2, 2.0, 10.0).unwrap();
        assert_eq!(optimal_control(&spec).unwrap(), vec![0.0, 2.0 * star]);
        let f = |t: &[f64]| objective(t, &spec).unwrap();
        let best = optimal_control(&spec).unwrap();
        assert!(f(&best) > f(&[0.05, 2.0 * star]));
        assert!(f(&best) > f(&[0.0, 2.0 * star + 0.05]));
    }
}
