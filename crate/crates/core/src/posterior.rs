//! Closed-form posterior for explicit operators.
//!
//! With `B = b^2 I` and diagonal `R`, the scaling-factor posterior is
//! `N(alpha, Sigma)` with
//!
//! ```text
//! Sigma^{-1} = (A^T R^{-1} A) ∘ mu mu^T + I / b^2
//! alpha      = Sigma ((A^T R^{-1} y) ∘ mu + c^b / b^2)
//! ```
//!
//! and the flux-space posterior is `N(alpha ∘ mu, Sigma ∘ mu mu^T)`. The
//! precision matrix is always formed and factorized; `Sigma` itself is only
//! materialized up to a dimension cap, above which only precision solves
//! are available.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::forward::{ForwardOperator, NoiseSpec, PriorSpec};
use crate::hadamard::{hadamard, scaled_adjoint_apply, scaled_gram};
use crate::linalg::{Cholesky, LinearMap, Matrix};

/// Largest parameter dimension for which `Sigma` is materialized.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

/// Posterior of the physical quantity `theta = c ∘ mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxPosterior {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

fn explicit_matrix(op: &ForwardOperator) -> Result<&Matrix> {
    op.matrix().ok_or_else(|| {
        Error::Unsupported(
            "closed-form posterior needs an explicit matrix; use the variational solver".into(),
        )
    })
}

fn check_dims(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior: &PriorSpec,
    mu: &[f64],
) -> Result<()> {
    ensure_len("control mu", mu, op.m())?;
    if prior.dim() != op.m() {
        return Err(Error::dim("prior mean", op.m(), prior.dim()));
    }
    if noise.dim() != op.n() {
        return Err(Error::dim("noise variances", op.n(), noise.dim()));
    }
    Ok(())
}

/// `(A^T R^{-1} A) ∘ mu mu^T + I / b^2`, symmetrized.
pub fn precision_matrix(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior: &PriorSpec,
    mu: &[f64],
) -> Result<Matrix> {
    check_dims(op, noise, prior, mu)?;
    let a = explicit_matrix(op)?;
    let mut p = scaled_gram(a, &noise.precisions(), mu)?;
    let inv_b2 = 1.0 / prior.variance();
    for i in 0..p.rows() {
        p[(i, i)] += inv_b2;
    }
    p.symmetrized()
}

/// Cholesky factor of the posterior precision.
#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    chol: Cholesky,
}

impl PrecisionFactor {
    pub fn new(
        op: &ForwardOperator,
        noise: &NoiseSpec,
        prior: &PriorSpec,
        mu: &[f64],
    ) -> Result<Self> {
        let p = precision_matrix(op, noise, prior, mu)?;
        Ok(Self { chol: p.cholesky()? })
    }

    pub fn dim(&self) -> usize {
        self.chol.dim()
    }

    /// `Sigma v`, computed as a precision backsolve.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.chol.solve(v)
    }

    /// `Sigma` as a dense matrix, refused above `cap`.
    pub fn covariance(&self, cap: usize) -> Result<Matrix> {
        if self.dim() > cap {
            return Err(Error::Unsupported(format!(
                "m = {} exceeds the dense covariance cap {cap}; use precision solves",
                self.dim()
            )));
        }
        self.chol.inverse().symmetrized()
    }
}

/// `Sigma = ((A^T R^{-1} A) ∘ mu mu^T + I / b^2)^{-1}`.
pub fn posterior_covariance(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior: &PriorSpec,
    mu: &[f64],
) -> Result<Matrix> {
    PrecisionFactor::new(op, noise, prior, mu)?.covariance(DEFAULT_DENSE_CAP)
}

/// `(A^T R^{-1} y) ∘ mu + c / b^2`, the right-hand side shared by the
/// posterior mean and every ensemble MAP estimator.
pub(crate) fn map_rhs<A: LinearMap + ?Sized>(
    op: &A,
    noise: &NoiseSpec,
    prior_mean: &[f64],
    y: &[f64],
    prior_variance: f64,
    mu: &[f64],
) -> Result<Vec<f64>> {
    ensure_len("observation y", y, op.output_dim())?;
    ensure_len("prior mean", prior_mean, op.input_dim())?;
    let mut rhs = scaled_adjoint_apply(op, mu, &noise.whiten(y))?;
    let inv_b2 = 1.0 / prior_variance;
    rhs.iter_mut()
        .zip(prior_mean)
        .for_each(|(r, c)| *r += c * inv_b2);
    Ok(rhs)
}

/// `c_MAP = Sigma ((A^T R^{-1} y_k) ∘ mu + c_k / b^2)` for one
/// `(prior mean, observation)` pair.
pub fn map_estimator(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior_mean_k: &[f64],
    y_k: &[f64],
    prior: &PriorSpec,
    mu: &[f64],
    sigma: &Matrix,
) -> Result<Vec<f64>> {
    check_dims(op, noise, prior, mu)?;
    if sigma.shape() != (op.m(), op.m()) {
        return Err(Error::dim("Sigma", op.m(), sigma.rows()));
    }
    let rhs = map_rhs(op, noise, prior_mean_k, y_k, prior.variance(), mu)?;
    sigma.apply(&rhs)
}

/// Posterior mean `alpha`; identical to [`map_estimator`] at `(c^b, y)`.
pub fn posterior_mean(
    sigma: &Matrix,
    op: &ForwardOperator,
    noise: &NoiseSpec,
    y: &[f64],
    prior: &PriorSpec,
    mu: &[f64],
) -> Result<Vec<f64>> {
    map_estimator(op, noise, prior.mean(), y, prior, mu, sigma)
}

/// Full posterior `N(alpha, Sigma)`.
pub fn exact_posterior(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior: &PriorSpec,
    mu: &[f64],
    y: &[f64],
) -> Result<GaussianPosterior> {
    let covariance = posterior_covariance(op, noise, prior, mu)?;
    let mean = posterior_mean(&covariance, op, noise, y, prior, mu)?;
    Ok(GaussianPosterior { mean, covariance })
}

/// `delta = alpha ∘ mu`, `Gamma = Sigma ∘ mu mu^T`.
pub fn flux_posterior(post: &GaussianPosterior, mu: &[f64]) -> Result<FluxPosterior> {
    let mean = hadamard(&post.mean, mu)?;
    let covariance = post.covariance.hadamard(&Matrix::outer(mu, mu))?;
    Ok(FluxPosterior { mean, covariance })
}

/// Covariance of the ensemble MAP estimator, `Sigma Cov[rhs] Sigma` with
/// `Cov[rhs] = (A^T R^{-1} A) ∘ mu mu^T + I / b^2`.
///
/// Built by explicit composition so that its agreement with `Sigma` is a
/// checked identity rather than an assumption.
pub fn map_estimator_covariance(
    op: &ForwardOperator,
    noise: &NoiseSpec,
    prior: &PriorSpec,
    mu: &[f64],
) -> Result<Matrix> {
    let sigma = posterior_covariance(op, noise, prior, mu)?;
    // Cov[(A^T R^{-1} y_k) ∘ mu] = (A^T R^{-1} R R^{-1} A) ∘ mu mu^T
    let a = explicit_matrix(op)?;
    let r_inv = noise.precisions();
    let weighted = Matrix::from_diagonal(&r_inv)
        .matmul(&Matrix::from_diagonal(noise.variances()))?
        .matmul(&Matrix::from_diagonal(&r_inv))?;
    let inner = a.transpose().matmul(&weighted)?.matmul(a)?;
    let mut cov_rhs = inner.hadamard(&Matrix::outer(mu, mu))?;
    // Cov[c_k / b^2] = b^2 / b^4 I
    let b2 = prior.variance();
    for i in 0..cov_rhs.rows() {
        cov_rhs[(i, i)] += b2 / (b2 * b2);
    }
    sigma.matmul(&cov_rhs)?.matmul(&sigma.transpose())
}

/// Computes `c_MAP` for many `(c_k, y_k)` pairs against one factorization.
#[derive(Debug, Clone)]
pub struct AnalyticMapKernel {
    sigma: Option<Matrix>,
    factor: PrecisionFactor,
}

impl AnalyticMapKernel {
    pub fn new(
        op: &ForwardOperator,
        noise: &NoiseSpec,
        prior: &PriorSpec,
        mu: &[f64],
        dense_cap: usize,
    ) -> Result<Self> {
        let factor = PrecisionFactor::new(op, noise, prior, mu)?;
        let sigma = if op.m() <= dense_cap {
            Some(factor.covariance(dense_cap)?)
        } else {
            None
        };
        Ok(Self { sigma, factor })
    }

    pub fn sigma(&self) -> Option<&Matrix> {
        self.sigma.as_ref()
    }

    /// Same arithmetic as [`map_estimator`] when `Sigma` is materialized.
    pub fn estimate(
        &self,
        op: &ForwardOperator,
        noise: &NoiseSpec,
        prior_variance: f64,
        mu: &[f64],
        prior_mean_k: &[f64],
        y_k: &[f64],
    ) -> Result<Vec<f64>> {
        let rhs = map_rhs(op, noise, prior_mean_k, y_k, prior_variance, mu)?;
        match &self.sigma {
            Some(s) => s.apply(&rhs),
            None => self.factor.solve(&rhs),
        }
    }
}
