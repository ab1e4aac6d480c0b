//! Gaussian and Gaussian-mixture laws used as priors, closed-form terminal
//! distributions and test oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// Multivariate normal law `N(mean, covariance)`; the covariance may be singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::EmptyInput("gaussian mean"));
        }
        check_dim(d, covariance.nrows())?;
        check_dim(d, covariance.ncols())?;
        if covariance.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite gaussian parameter".into()));
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let min_eig = covariance.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        Ok(Self { mean, covariance })
    }

    /// One-dimensional `N(mean, variance)`.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal_element(d, d, variance),
        )
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            covariance: DMatrix::identity(dim, dim),
        }
    }

    /// Builds a law without validation; callers guarantee symmetry and PSD.
    pub(crate) fn from_parts(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Mean of a one-dimensional law (first coordinate otherwise).
    pub fn mean_scalar(&self) -> f64 {
        self.mean[0]
    }

    /// Variance of a one-dimensional law (first diagonal entry otherwise).
    pub fn variance_scalar(&self) -> f64 {
        self.covariance[(0, 0)]
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.covariance[(i, j)] == 0.0))
    }

    /// Returns `Some(v)` when the covariance is exactly `v * I`.
    pub fn isotropic_variance(&self) -> Option<f64> {
        let v = self.covariance[(0, 0)];
        let d = self.dim();
        let iso = (0..d).all(|i| {
            (0..d).all(|j| {
                let c = self.covariance[(i, j)];
                if i == j {
                    c == v
                } else {
                    c == 0.0
                }
            })
        });
        iso.then_some(v)
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.covariance.clone()).ok_or(Error::SingularCovariance)
    }

    /// Lower-triangular factor `L` with `L L^T = covariance`, tolerating singular
    /// (e.g. point-mass) covariances via a symmetric eigendecomposition.
    pub fn sampling_factor(&self) -> DMatrix<f64> {
        if let Some(chol) = Cholesky::new(self.covariance.clone()) {
            return chol.l();
        }
        let eig = self.covariance.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let chol = self.cholesky()?;
        let diff = DVector::from_column_slice(x) - &self.mean;
        let solved = chol.solve(&diff);
        let quad = diff.dot(&solved);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
    }
}

/// Finite mixture `sum_i w_i N(mu_i, Sigma_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureLaw {
    weights: Vec<f64>,
    components: Vec<GaussianLaw>,
}

impl MixtureLaw {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianLaw>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("mixture components"));
        }
        check_dim(components.len(), weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let d = components[0].dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        Ok(Self {
            weights,
            components,
        })
    }

    /// Mixture of isotropic components `N(mu_i, variance_i * I)`.
    pub fn isotropic(weights: Vec<f64>, means: &[Vec<f64>], variances: &[f64]) -> Result<Self> {
        check_dim(means.len(), variances.len())?;
        let comps = means
            .iter()
            .zip(variances)
            .map(|(m, v)| GaussianLaw::isotropic(m, *v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights, comps)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianLaw] {
        &self.components
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .fold(DVector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * *w)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let logs = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.log_density(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&logs))
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
