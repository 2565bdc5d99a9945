//! Functional uncertainty from a stored ensemble.
//!
//! For a linear functional `phi = h^T c` the ensemble gives `M` samples
//! `phi_k`. Their sample variance `s^2` satisfies
//! `(M - 1) s^2 / sigma^2 ~ chi^2_{M-1}`, which yields confidence intervals on
//! the posterior variance and, through the factors `L <= 1 <= R`, a pair of
//! intervals that bracket the exact Bayesian credible interval.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleStore;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::forward::PriorSpec;
use crate::stats::{mean, sample_variance};

pub use crate::special::{chi2_quantile, normal_quantile};

/// Weights `h` of a linear functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    pub weights: Vec<f64>,
    /// Apply `h` to flux members `c ∘ mu` instead of scaling factors.
    #[serde(default)]
    pub include_control: bool,
}

impl FunctionalSpec {
    pub fn new(weights: Vec<f64>, include_control: bool) -> Result<Self> {
        ensure_finite("functional weights", &weights)?;
        Ok(Self {
            weights,
            include_control,
        })
    }

    /// `e_i` in dimension `m`.
    pub fn coordinate(m: usize, i: usize, include_control: bool) -> Result<Self> {
        if i >= m {
            return Err(Error::InvalidArgument(format!("coordinate {i} out of range for {m}")));
        }
        let mut weights = vec![0.0; m];
        weights[i] = 1.0;
        Self::new(weights, include_control)
    }

    /// Effective weights on scaling factors: `h` or `h ∘ mu`.
    pub fn effective_weights(&self, mu: &[f64]) -> Result<Vec<f64>> {
        ensure_len("functional control mu", mu, self.weights.len())?;
        Ok(if self.include_control {
            self.weights.iter().zip(mu).map(|(h, m)| h * m).collect()
        } else {
            self.weights.clone()
        })
    }

    /// `phi` at a single scaling-factor vector.
    pub fn evaluate(&self, c: &[f64], mu: &[f64]) -> Result<f64> {
        ensure_len("functional argument", c, self.weights.len())?;
        let w = self.effective_weights(mu)?;
        Ok(w.iter().zip(c).map(|(a, b)| a * b).sum())
    }
}

/// `phi_k` for every member, one row at a time.
pub fn functional_values(store: &EnsembleStore, spec: &FunctionalSpec) -> Result<Vec<f64>> {
    let w = spec.effective_weights(store.control())?;
    let members = store.members();
    Ok((0..members.rows())
        .map(|k| members.row(k).iter().zip(&w).map(|(c, h)| c * h).sum())
        .collect())
}

/// Unbiased sample variance of the functional samples.
pub fn empirical_functional_variance(phis: &[f64]) -> Result<f64> {
    sample_variance(phis)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalSide {
    #[default]
    TwoSided,
    /// `[lower, +inf)`
    LowerBound,
    /// `[0, upper]`
    UpperBound,
}

fn check_level(name: &str, level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {level} outside (0, 1)")))
    }
}

fn check_members(members: usize) -> Result<()> {
    if members < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: members,
        });
    }
    Ok(())
}

/// `(L, R)` with `L^2 = (M-1) / chi^2_{M-1, 1-alpha/2}` and
/// `R^2 = (M-1) / chi^2_{M-1, alpha/2}`.
pub fn inflation_deflation_factors(members: usize, alpha: f64) -> Result<(f64, f64)> {
    check_members(members)?;
    check_level("alpha", alpha)?;
    let dof = members - 1;
    let upper = chi2_quantile(dof, 1.0 - 0.5 * alpha)?;
    let lower = chi2_quantile(dof, 0.5 * alpha)?;
    let d = dof as f64;
    Ok(((d / upper).sqrt(), (d / lower).sqrt()))
}

/// Two-sided `1 - alpha` confidence interval for the posterior variance.
pub fn variance_confidence_interval(sigma_hat_sq: f64, members: usize, alpha: f64) -> Result<(f64, f64)> {
    variance_confidence_interval_sided(sigma_hat_sq, members, alpha, IntervalSide::TwoSided)
}

pub fn variance_confidence_interval_sided(
    sigma_hat_sq: f64,
    members: usize,
    alpha: f64,
    side: IntervalSide,
) -> Result<(f64, f64)> {
    check_members(members)?;
    check_level("alpha", alpha)?;
    if !(sigma_hat_sq >= 0.0 && sigma_hat_sq.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sample variance {sigma_hat_sq} must be finite and non-negative"
        )));
    }
    let dof = members - 1;
    let scaled = dof as f64 * sigma_hat_sq;
    Ok(match side {
        IntervalSide::TwoSided => (
            scaled / chi2_quantile(dof, 1.0 - 0.5 * alpha)?,
            scaled / chi2_quantile(dof, 0.5 * alpha)?,
        ),
        IntervalSide::LowerBound => (scaled / chi2_quantile(dof, 1.0 - alpha)?, f64::INFINITY),
        IntervalSide::UpperBound => (0.0, scaled / chi2_quantile(dof, alpha)?),
    })
}

/// Square roots of the variance interval endpoints.
pub fn sd_confidence_interval(sigma_hat: f64, members: usize, alpha: f64) -> Result<(f64, f64)> {
    sd_confidence_interval_sided(sigma_hat, members, alpha, IntervalSide::TwoSided)
}

pub fn sd_confidence_interval_sided(
    sigma_hat: f64,
    members: usize,
    alpha: f64,
    side: IntervalSide,
) -> Result<(f64, f64)> {
    if !(sigma_hat >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation {sigma_hat} must be non-negative"
        )));
    }
    let (lo, hi) = variance_confidence_interval_sided(sigma_hat * sigma_hat, members, alpha, side)?;
    Ok((lo.sqrt(), hi.sqrt()))
}

/// `phi_map ± z_{1-gamma/2} sigma`.
pub fn credible_interval(phi_map: f64, sigma: f64, gamma: f64) -> Result<(f64, f64)> {
    check_level("gamma", gamma)?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be non-negative")));
    }
    let half = normal_quantile(1.0 - 0.5 * gamma)? * sigma;
    Ok((phi_map - half, phi_map + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalUQReport {
    pub phi_map: f64,
    /// Ensemble mean of the functional, when known.
    pub phi_bar: Option<f64>,
    pub sigma_hat: f64,
    pub members: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub z: f64,
    #[serde(rename = "L")]
    pub deflation: f64,
    #[serde(rename = "R")]
    pub inflation: f64,
    pub nominal_interval: (f64, f64),
    pub inflated_interval: (f64, f64),
    pub deflated_interval: (f64, f64),
    /// Confidence interval for the lower credible endpoint.
    pub lower_endpoint_ci: (f64, f64),
    /// Confidence interval for the upper credible endpoint.
    pub upper_endpoint_ci: (f64, f64),
}

/// Nominal, inflated (`sigma_hat R`) and deflated (`sigma_hat L`) credible
/// intervals plus confidence intervals for each endpoint.
pub fn bracketed_report(
    phi_map: f64,
    sigma_hat: f64,
    members: usize,
    alpha: f64,
    gamma: f64,
) -> Result<FunctionalUQReport> {
    if !phi_map.is_finite() {
        return Err(Error::NonFinite("phi_map"));
    }
    let (l, r) = inflation_deflation_factors(members, alpha)?;
    let nominal = credible_interval(phi_map, sigma_hat, gamma)?;
    let z = normal_quantile(1.0 - 0.5 * gamma)?;
    let lo_r = phi_map - z * sigma_hat * r;
    let lo_l = phi_map - z * sigma_hat * l;
    let hi_l = phi_map + z * sigma_hat * l;
    let hi_r = phi_map + z * sigma_hat * r;
    Ok(FunctionalUQReport {
        phi_map,
        phi_bar: None,
        sigma_hat,
        members,
        alpha,
        gamma,
        z,
        deflation: l,
        inflation: r,
        nominal_interval: nominal,
        inflated_interval: (lo_r, hi_r),
        deflated_interval: (lo_l, hi_l),
        lower_endpoint_ci: (lo_r, lo_l),
        upper_endpoint_ci: (hi_l, hi_r),
    })
}

/// Report for `spec` from a stored ensemble; `phi_map` comes from the
/// caller's central inversion.
pub fn functional_report(
    store: &EnsembleStore,
    spec: &FunctionalSpec,
    phi_map: f64,
    alpha: f64,
    gamma: f64,
) -> Result<FunctionalUQReport> {
    let phis = functional_values(store, spec)?;
    let sigma_hat = empirical_functional_variance(&phis)?.sqrt();
    let mut report = bracketed_report(phi_map, sigma_hat, phis.len(), alpha, gamma)?;
    report.phi_bar = Some(mean(&phis));
    Ok(report)
}

/// `1 - sigma_posterior / sigma_prior`; negative when the posterior is wider.
pub fn uncertainty_reduction(sigma_posterior: f64, sigma_prior: f64) -> Result<f64> {
    if !(sigma_prior > 0.0 && sigma_prior.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior standard deviation {sigma_prior} must be positive"
        )));
    }
    if !(sigma_posterior >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "posterior standard deviation {sigma_posterior} must be non-negative"
        )));
    }
    Ok(1.0 - sigma_posterior / sigma_prior)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSdConvention {
    /// Exact prior SD of `h^T (c ∘ mu)`: `sqrt(b^2 sum h_i^2 mu_i^2)`.
    #[default]
    Model,
    /// `b |h^T mu|`, the prior SD applied to the aggregated control flux.
    FluxScale,
}

impl std::str::FromStr for PriorSdConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "flux-scale" => Ok(Self::FluxScale),
            other => Err(Error::Config(format!(
                "unknown prior SD convention {other:?} (expected model or flux-scale)"
            ))),
        }
    }
}

/// Prior SD of the flux functional `h^T (c ∘ mu)`.
pub fn prior_functional_sd(
    spec: &FunctionalSpec,
    mu: &[f64],
    prior: &PriorSpec,
    convention: PriorSdConvention,
) -> Result<f64> {
    ensure_len("prior SD control mu", mu, spec.weights.len())?;
    if prior.dim() != mu.len() {
        return Err(Error::dim("prior SD prior", mu.len(), prior.dim()));
    }
    let b = prior.sd();
    Ok(match convention {
        PriorSdConvention::Model => {
            let s: f64 = spec.weights.iter().zip(mu).map(|(h, m)| (h * m).powi(2)).sum();
            (prior.variance() * s).sqrt()
        }
        PriorSdConvention::FluxScale => {
            let s: f64 = spec.weights.iter().zip(mu).map(|(h, m)| h * m).sum();
            b * s.abs()
        }
    })
}

/// One row of the interval timeseries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub label: String,
    pub report: FunctionalUQReport,
    pub sigma_prior: f64,
}

impl TimeseriesRow {
    /// Percent reduction at `sigma_hat`.
    pub fn pct_reduction_point(&self) -> f64 {
        100.0 * (1.0 - self.report.sigma_hat / self.sigma_prior)
    }

    /// Percent reduction at the inflated SD `sigma_hat R`.
    pub fn pct_reduction_inflated(&self) -> f64 {
        100.0 * (1.0 - self.report.sigma_hat * self.report.inflation / self.sigma_prior)
    }
}

pub const TIMESERIES_HEADER: [&str; 14] = [
    "label",
    "phi_map",
    "sigma_hat",
    "L",
    "R",
    "nominal_lo",
    "nominal_hi",
    "deflated_lo",
    "deflated_hi",
    "inflated_lo",
    "inflated_hi",
    "pct_reduction_point",
    "pct_reduction_inflated",
    "sigma_prior",
];

pub fn write_timeseries_csv(mut out: impl Write, rows: &[TimeseriesRow]) -> Result<()> {
    writeln!(out, "{}", TIMESERIES_HEADER.join(","))?;
    for row in rows {
        if row.label.contains([',', '"', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "label {:?} must not contain commas, quotes or newlines",
                row.label
            )));
        }
        let r = &row.report;
        let values = [
            r.phi_map,
            r.sigma_hat,
            r.deflation,
            r.inflation,
            r.nominal_interval.0,
            r.nominal_interval.1,
            r.deflated_interval.0,
            r.deflated_interval.1,
            r.inflated_interval.0,
            r.inflated_interval.1,
            row.pct_reduction_point(),
            row.pct_reduction_inflated(),
            row.sigma_prior,
        ];
        write!(out, "{}", row.label)?;
        for v in values {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_timeseries_csv(path: impl AsRef<Path>, rows: &[TimeseriesRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_timeseries_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}
