//! Experiment drivers behind the command-line tool.
//!
//! Each driver computes an outcome value first and writes files second, so the
//! numbers can be checked without touching the filesystem.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AggregateSpec, ExperimentConfig, OperatorKind};
use crate::ensemble::{
    empirical_covariance, flux_members, run_ensemble, EnsembleConfig, EnsembleRun, EnsembleStore,
    MemberSampler, SolverChoice,
};
use crate::error::{Error, Result};
use crate::forward::{
    debias_observations, read_matrix_csv, read_vector_csv, synthetic_operator, toy_operator,
    ForwardOperator, NoiseSpec, PriorSpec,
};
use crate::linalg::{dot, relative_error, LinearMap, Matrix};
use crate::posterior::{
    exact_posterior, flux_posterior, map_estimator_covariance, posterior_covariance,
    AnalyticMapKernel,
};
use crate::rng::{domain, StreamRng};
use crate::solver::{minimize, FourDVarCost, SolverReport};
use crate::special::{chi2_cdf, ks_test};
use crate::stats::sample_covariance;
use crate::store::save_store;
use crate::uq::{
    bracketed_report, empirical_functional_variance, functional_report, functional_values,
    inflation_deflation_factors, prior_functional_sd, save_timeseries_csv, sd_confidence_interval,
    variance_confidence_interval, FunctionalSpec, FunctionalUQReport, TimeseriesRow,
};

/// Relative operator-norm error bound for the toy ensemble at one million members.
pub const TOY_ERROR_BOUND: f64 = 0.01784;

/// Ensembles smaller than this get a warning about the variance estimate.
pub const SMALL_ENSEMBLE: usize = 30;

/// Formats `v` with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let e = v.abs().log10().floor() as i32;
    if (-4..6).contains(&e) {
        format!("{:.*}", (5 - e).max(0) as usize, v)
    } else {
        format!("{v:.5e}")
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_vector_csv(path: &Path, v: &[f64]) -> Result<()> {
    let mut s = String::with_capacity(v.len() * 24);
    for x in v {
        let _ = writeln!(s, "{x:.16e}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// A fully specified inverse problem.
#[derive(Debug, Clone)]
pub struct Problem {
    /// The operator the solvers see; possibly matrix-free.
    pub operator: ForwardOperator,
    /// Explicit form, when there is one.
    pub explicit: Option<ForwardOperator>,
    pub prior: PriorSpec,
    pub noise: NoiseSpec,
    pub mu: Vec<f64>,
    /// Scaling factors used to simulate the central observation.
    pub truth: Vec<f64>,
    pub condition_number: Option<f64>,
}

impl Problem {
    pub fn m(&self) -> usize {
        self.operator.m()
    }

    pub fn n(&self) -> usize {
        self.operator.n()
    }

    /// `y = A (c_true ∘ mu) + eps`, after removing the offset.
    pub fn central_observation(&self, seed: u64) -> Result<Vec<f64>> {
        let theta: Vec<f64> = self.truth.iter().zip(&self.mu).map(|(c, m)| c * m).collect();
        let mut y = self.operator.apply(&theta)?;
        let mut rng = StreamRng::new(seed, domain::OBSERVATION, 0);
        for ((yi, z), v) in y.iter_mut().zip(self.operator.offset()).zip(self.noise.variances()) {
            *yi += z + v.sqrt() * rng.standard_normal();
        }
        debias_observations(&y, &self.operator)
    }

    pub fn ensemble_config(&self, cfg: &ExperimentConfig) -> Result<EnsembleConfig> {
        let op = match cfg.ensemble.solver {
            SolverChoice::Analytic => self.explicit.clone().ok_or_else(|| {
                Error::Config("the analytic solver needs an explicit operator".into())
            })?,
            SolverChoice::Variational => self.operator.clone(),
        };
        let mut e = EnsembleConfig::new(
            op,
            self.prior.clone(),
            self.noise.clone(),
            self.mu.clone(),
            cfg.ensemble.members,
            cfg.ensemble.master_seed,
        )?
        .with_solver(cfg.ensemble.solver)
        .with_workers(cfg.ensemble.workers);
        e.lbfgs = cfg.lbfgs.clone();
        e.failure_policy = cfg.ensemble.failure;
        e.dense_cap = cfg.ensemble.dense_cap;
        e.created_unix = cfg.ensemble.created_unix;
        e.validate()?;
        Ok(e)
    }

    /// Variational MAP for `y` from the prior mean.
    pub fn central_inversion(&self, y: &[f64], cfg: &ExperimentConfig) -> Result<SolverReport> {
        let cost = FourDVarCost::new(
            &self.operator,
            &self.noise,
            self.prior.variance(),
            self.prior.mean(),
            y,
            &self.mu,
        )?;
        let report = minimize(self.prior.mean(), &cost, &cfg.lbfgs);
        if !report.converged {
            return Err(Error::NotConverged(format!(
                "central inversion stopped after {} iterations: {:?}",
                report.iterations, report.termination
            )));
        }
        Ok(report)
    }

    /// Configured functionals, or a sensible default for the dimension.
    pub fn functionals(&self, cfg: &ExperimentConfig) -> Result<Vec<(String, FunctionalSpec)>> {
        let m = self.m();
        if !cfg.uq.functionals.is_empty() {
            return cfg
                .uq
                .functionals
                .iter()
                .map(|f| {
                    if f.weights.len() != m {
                        return Err(Error::Config(format!(
                            "functional {:?} has {} weights, expected {m}",
                            f.label,
                            f.weights.len()
                        )));
                    }
                    Ok((f.label.clone(), FunctionalSpec::new(f.weights.clone(), f.include_control)?))
                })
                .collect();
        }
        let agg = match &cfg.uq.aggregate {
            Some(a) => a.clone(),
            None if m <= 4 => {
                return (0..m)
                    .map(|i| Ok((format!("theta{}", i + 1), FunctionalSpec::coordinate(m, i, true)?)))
                    .collect();
            }
            None => {
                let cells = if m.is_multiple_of(4) { 4 } else { 1 };
                AggregateSpec::monthly(cells, m / cells, None)
            }
        };
        agg.weights(m)?
            .into_iter()
            .map(|(label, w)| Ok((label, FunctionalSpec::new(w, true)?)))
            .collect()
    }
}

fn default_control(m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| 1.0 + 0.5 * (2.0 * PI * (i as f64 + 0.5) / m as f64).sin())
        .collect()
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let p = &cfg.problem;
    let (mut explicit, condition_number) = match p.operator {
        OperatorKind::Toy => (toy_operator(p.epsilon)?, None),
        OperatorKind::Synthetic => {
            let s = synthetic_operator(p.m, p.n, p.smoothness, p.operator_seed)?;
            (s.operator, Some(s.condition_number))
        }
        OperatorKind::File => {
            let path = p.path.as_ref().expect("validated");
            let a = read_matrix_csv(path)?;
            let cond = a.condition_number();
            (ForwardOperator::explicit(a), Some(cond))
        }
    };
    if let Some(path) = &p.offset_path {
        explicit = explicit.with_offset(read_vector_csv(path)?)?;
    }
    let (m, n) = (explicit.m(), explicit.n());
    let operator = if p.matrix_free {
        let a = explicit.matrix().expect("explicit operator").clone();
        let offset = explicit.offset().to_vec();
        let fwd = Arc::new(a);
        let adj = Arc::clone(&fwd);
        ForwardOperator::matrix_free(
            m,
            n,
            Arc::new(move |x, out| fwd.apply_into(x, out)),
            Arc::new(move |w, out| adj.adjoint_into(w, out)),
            true,
        )?
        .with_offset(offset)?
    } else {
        explicit.clone()
    };
    let prior_mean = cfg.prior.mean.clone().unwrap_or_else(|| vec![1.0; m]);
    if prior_mean.len() != m {
        return Err(Error::Config(format!("prior.mean has length {}, expected {m}", prior_mean.len())));
    }
    let prior = PriorSpec::new(prior_mean, cfg.prior.b2)?;
    let noise = match &cfg.noise.variances {
        Some(v) if v.len() != n => {
            return Err(Error::Config(format!("noise.variances has length {}, expected {n}", v.len())))
        }
        Some(v) => NoiseSpec::new(v.clone())?,
        None => NoiseSpec::isotropic(n, cfg.noise.variance)?,
    };
    let mu = match (&cfg.control.mu, &cfg.control.path) {
        (Some(mu), _) => mu.clone(),
        (None, Some(path)) => read_vector_csv(path)?,
        (None, None) => default_control(m),
    };
    if mu.len() != m {
        return Err(Error::Config(format!("control has length {}, expected {m}", mu.len())));
    }
    let truth = match (&cfg.truth.theta, &cfg.truth.scaling) {
        (Some(theta), _) => {
            if theta.len() != m {
                return Err(Error::Config(format!("truth.theta has length {}, expected {m}", theta.len())));
            }
            theta
                .iter()
                .zip(&mu)
                .map(|(t, u)| {
                    if *u == 0.0 {
                        Err(Error::Config("truth.theta needs a nonzero control".into()))
                    } else {
                        Ok(t / u)
                    }
                })
                .collect::<Result<Vec<f64>>>()?
        }
        (None, Some(c)) if c.len() != m => {
            return Err(Error::Config(format!("truth.scaling has length {}, expected {m}", c.len())))
        }
        (None, Some(c)) => c.clone(),
        (None, None) => vec![1.0; m],
    };
    Ok(Problem {
        operator,
        explicit: Some(explicit),
        prior,
        noise,
        mu,
        truth,
        condition_number,
    })
}

fn operator_norm_rel_error(estimate: &Matrix, exact: &Matrix) -> Result<f64> {
    Ok(estimate.sub(exact)?.symmetric_operator_norm()? / exact.symmetric_operator_norm()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Toy2dOutcome {
    pub members: usize,
    pub master_seed: u64,
    pub solver: SolverChoice,
    pub posterior_mean: Vec<f64>,
    pub flux_mean: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma_cmap: Vec<Vec<f64>>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub cov_theta_k: Vec<Vec<f64>>,
    pub gamma_hat: Vec<Vec<f64>>,
    pub rel_error: f64,
    pub flux_rel_error: f64,
    pub bound: f64,
    pub within_bound: bool,
    pub warnings: Vec<String>,
}

impl Toy2dOutcome {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mat = |s: &mut String, name: &str, m: &[Vec<f64>]| {
            let _ = writeln!(s, "{name}:");
            for row in m {
                let cells: Vec<String> = row.iter().map(|v| format!("{:>14}", sig6(*v))).collect();
                let _ = writeln!(s, "  {}", cells.join(" "));
            }
        };
        let _ = writeln!(
            s,
            "toy2d: M = {}, seed = {}, solver = {}",
            self.members, self.master_seed, self.solver
        );
        mat(&mut s, "Sigma", &self.sigma);
        mat(&mut s, "Sigma_cMAP", &self.sigma_cmap);
        mat(&mut s, "Sigma_hat", &self.sigma_hat);
        mat(&mut s, "Gamma", &self.gamma);
        mat(&mut s, "Cov[theta_k]", &self.cov_theta_k);
        mat(&mut s, "Gamma_hat", &self.gamma_hat);
        let _ = writeln!(
            s,
            "relative error |Sigma_hat - Sigma|_2 / |Sigma|_2 = {} ({} {})",
            sig6(self.rel_error),
            if self.within_bound { "<=" } else { ">" },
            self.bound
        );
        let _ = writeln!(s, "flux relative error = {}", sig6(self.flux_rel_error));
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

pub fn toy2d(cfg: &ExperimentConfig) -> Result<Toy2dOutcome> {
    let problem = build_problem(cfg)?;
    let explicit = problem
        .explicit
        .as_ref()
        .ok_or_else(|| Error::Config("toy2d needs an explicit operator".into()))?;
    let y = problem.central_observation(cfg.ensemble.master_seed)?;
    let post = exact_posterior(explicit, &problem.noise, &problem.prior, &problem.mu, &y)?;
    let flux = flux_posterior(&post, &problem.mu)?;
    let sigma_cmap = map_estimator_covariance(explicit, &problem.noise, &problem.prior, &problem.mu)?;
    let outer = Matrix::outer(&problem.mu, &problem.mu);
    let cov_theta_k = sigma_cmap.hadamard(&outer)?;

    let mut warnings = Vec::new();
    if cfg.ensemble.members < SMALL_ENSEMBLE {
        let msg = format!(
            "only {} members: the covariance estimate has very high variance",
            cfg.ensemble.members
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let run = run_ensemble(&problem.ensemble_config(cfg)?)?;
    let sigma_hat = empirical_covariance(&run.store, cfg.ensemble.dense_cap)?;
    let gamma_hat = sample_covariance(&flux_members(&run.store))?;
    let rel_error = operator_norm_rel_error(&sigma_hat, &post.covariance)?;
    let flux_rel_error = operator_norm_rel_error(&gamma_hat, &flux.covariance)?;
    Ok(Toy2dOutcome {
        members: run.store.len(),
        master_seed: cfg.ensemble.master_seed,
        solver: cfg.ensemble.solver,
        posterior_mean: post.mean,
        flux_mean: flux.mean,
        sigma: post.covariance.to_rows(),
        sigma_cmap: sigma_cmap.to_rows(),
        sigma_hat: sigma_hat.to_rows(),
        gamma: flux.covariance.to_rows(),
        cov_theta_k: cov_theta_k.to_rows(),
        gamma_hat: gamma_hat.to_rows(),
        rel_error,
        flux_rel_error,
        bound: TOY_ERROR_BOUND,
        within_bound: rel_error <= TOY_ERROR_BOUND,
        warnings,
    })
}

pub fn write_toy2d(outcome: &Toy2dOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("toy2d.json"), outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorRow {
    #[serde(rename = "M")]
    pub members: usize,
    #[serde(rename = "L")]
    pub deflation: f64,
    #[serde(rename = "R")]
    pub inflation: f64,
}

pub fn factors(cfg: &ExperimentConfig) -> Result<Vec<FactorRow>> {
    cfg.factors
        .members
        .iter()
        .map(|&m| {
            let (l, r) = inflation_deflation_factors(m, cfg.factors.alpha)?;
            Ok(FactorRow {
                members: m,
                deflation: l,
                inflation: r,
            })
        })
        .collect()
}

pub fn factors_csv(rows: &[FactorRow]) -> String {
    let mut s = String::from("M,L,R\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.8},{:.8}", r.members, r.deflation, r.inflation);
    }
    s
}

pub fn write_factors(rows: &[FactorRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("factors.csv"), factors_csv(rows))?;
    Ok(())
}

/// One functional's result in the synthetic inversion.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalOutcome {
    pub label: String,
    pub report: FunctionalUQReport,
    pub sigma_prior: f64,
    /// `sqrt(h^T Sigma h)` when `Sigma` is available.
    pub sigma_exact: Option<f64>,
    pub phi_truth: f64,
    pub variance_ci: (f64, f64),
    /// Whether the variance interval covers `h^T Sigma h`.
    pub variance_ci_covers_exact: Option<bool>,
    pub pct_reduction_point: f64,
    pub pct_reduction_inflated: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticOutcome {
    pub problem: Problem,
    pub central: SolverReport,
    pub run: EnsembleRun,
    pub functionals: Vec<FunctionalOutcome>,
    /// Largest per-member relative difference between the variational and
    /// analytic ensembles.
    pub cross_check: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SyntheticSummary<'a> {
    m: usize,
    n: usize,
    members: usize,
    requested_members: usize,
    master_seed: u64,
    solver: SolverChoice,
    operator_fingerprint: &'a str,
    condition_number: Option<f64>,
    central_iterations: usize,
    central_gradient_norm: f64,
    nonconverged: &'a [usize],
    cross_check_max_rel_diff: Option<f64>,
}

impl SyntheticOutcome {
    pub fn summary(&self) -> String {
        let meta = self.run.store.metadata();
        let mut s = format!(
            "synthetic: m = {}, n = {}, M = {}, solver = {}\n",
            meta.m, meta.n, meta.members, meta.solver
        );
        if let Some(c) = self.problem.condition_number {
            let _ = writeln!(s, "operator condition number = {}", sig6(c));
        }
        let _ = writeln!(
            s,
            "central inversion: {} iterations, |g|_inf = {}",
            self.central.iterations,
            sig6(self.central.final_gradient_norm)
        );
        if let Some(c) = self.cross_check {
            let _ = writeln!(s, "analytic vs variational max relative difference = {}", sig6(c));
        }
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}",
            "label", "phi_map", "sigma_hat", "sigma_exact", "nominal_hw", "inflated_hw", "red_pt%", "red_inf%"
        );
        for f in &self.functionals {
            let r = &f.report;
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}",
                f.label,
                sig6(r.phi_map),
                sig6(r.sigma_hat),
                f.sigma_exact.map(sig6).unwrap_or_else(|| "-".into()),
                sig6(r.nominal_interval.1 - r.phi_map),
                sig6(r.inflated_interval.1 - r.phi_map),
                sig6(f.pct_reduction_point),
                sig6(f.pct_reduction_inflated)
            );
        }
        s
    }
}

fn functional_outcomes(
    problem: &Problem,
    cfg: &ExperimentConfig,
    store: &EnsembleStore,
    central: &[f64],
    sigma: Option<&Matrix>,
) -> Result<Vec<FunctionalOutcome>> {
    let mut out = Vec::new();
    for (label, spec) in problem.functionals(cfg)? {
        let phi_map = spec.evaluate(central, &problem.mu)?;
        let report = functional_report(store, &spec, phi_map, cfg.uq.alpha, cfg.uq.gamma)?;
        let sigma_prior = prior_functional_sd(&spec, &problem.mu, &problem.prior, cfg.uq.prior_sd)?;
        let variance_ci = variance_confidence_interval(report.sigma_hat.powi(2), report.members, cfg.uq.alpha)?;
        let exact_var = match sigma {
            Some(s) => {
                let w = spec.effective_weights(&problem.mu)?;
                Some(dot(&w, &s.apply(&w)?))
            }
            None => None,
        };
        let row = TimeseriesRow {
            label: label.clone(),
            report: report.clone(),
            sigma_prior,
        };
        out.push(FunctionalOutcome {
            label,
            phi_truth: spec.evaluate(&problem.truth, &problem.mu)?,
            sigma_exact: exact_var.map(f64::sqrt),
            variance_ci_covers_exact: exact_var.map(|v| variance_ci.0 <= v && v <= variance_ci.1),
            variance_ci,
            pct_reduction_point: row.pct_reduction_point(),
            pct_reduction_inflated: row.pct_reduction_inflated(),
            sigma_prior,
            report,
        });
    }
    Ok(out)
}

/// Central inversion, ensemble, and per-functional reports.
pub fn synthetic(cfg: &ExperimentConfig) -> Result<SyntheticOutcome> {
    let problem = build_problem(cfg)?;
    let y = problem.central_observation(cfg.ensemble.master_seed)?;
    let central = problem.central_inversion(&y, cfg)?;
    let ens_cfg = problem.ensemble_config(cfg)?;
    let run = run_ensemble(&ens_cfg)?;

    let dense = problem.m() <= cfg.ensemble.dense_cap;
    let sigma = match (&problem.explicit, dense) {
        (Some(op), true) => Some(posterior_covariance(op, &problem.noise, &problem.prior, &problem.mu)?),
        _ => None,
    };
    let cross_check = match (&problem.explicit, cfg.ensemble.solver, dense) {
        (Some(_), SolverChoice::Variational, true) => {
            let mut analytic_cfg = cfg.clone();
            analytic_cfg.ensemble.solver = SolverChoice::Analytic;
            let analytic = run_ensemble(&problem.ensemble_config(&analytic_cfg)?)?;
            let excluded = &run.store.metadata().excluded;
            let kept = (0..ens_cfg.members).filter(|k| excluded.binary_search(k).is_err());
            let worst = kept
                .enumerate()
                .map(|(row, k)| {
                    relative_error(run.store.members().row(row), analytic.store.members().row(k))
                })
                .fold(0.0, f64::max);
            Some(worst)
        }
        _ => None,
    };
    let functionals = functional_outcomes(&problem, cfg, &run.store, &central.solution, sigma.as_ref())?;
    Ok(SyntheticOutcome {
        problem,
        central,
        run,
        functionals,
        cross_check,
    })
}

pub fn write_synthetic(outcome: &SyntheticOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if cfg.output.save_ensemble {
        save_store(&outcome.run.store, dir.join("ensemble.ens"))?;
    }
    write_vector_csv(&dir.join("central_map.csv"), &outcome.central.solution)?;
    write_json(&dir.join("reports.json"), &outcome.functionals)?;
    let rows: Vec<TimeseriesRow> = outcome
        .functionals
        .iter()
        .map(|f| TimeseriesRow {
            label: f.label.clone(),
            report: f.report.clone(),
            sigma_prior: f.sigma_prior,
        })
        .collect();
    save_timeseries_csv(dir.join("timeseries.csv"), &rows)?;
    let meta = outcome.run.store.metadata();
    write_json(
        &dir.join("summary.json"),
        &SyntheticSummary {
            m: meta.m,
            n: meta.n,
            members: meta.members,
            requested_members: meta.requested_members,
            master_seed: meta.master_seed,
            solver: meta.solver,
            operator_fingerprint: &meta.operator_fingerprint,
            condition_number: outcome.problem.condition_number,
            central_iterations: outcome.central.iterations,
            central_gradient_norm: outcome.central.final_gradient_norm,
            nonconverged: &outcome.run.nonconverged,
            cross_check_max_rel_diff: outcome.cross_check,
        },
    )
}

/// Empirical coverage with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    pub hits: usize,
    pub trials: usize,
    pub rate: f64,
    pub std_error: f64,
}

impl Coverage {
    fn new(hits: usize, trials: usize) -> Self {
        let rate = hits as f64 / trials as f64;
        Self {
            hits,
            trials,
            rate,
            std_error: (rate * (1.0 - rate) / trials as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsOutcome {
    pub replicates: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub level: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageOutcome {
    pub members: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma2_true: f64,
    pub variance_ci: Coverage,
    pub sd_ci: Coverage,
    pub endpoints: Coverage,
    pub ks: Option<KsOutcome>,
}

impl CoverageOutcome {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "coverage: M = {}, replicates = {}, alpha = {}, true variance = {}\n",
            self.members,
            self.replicates,
            self.alpha,
            sig6(self.sigma2_true)
        );
        for (name, c) in [
            ("variance CI", &self.variance_ci),
            ("SD CI", &self.sd_ci),
            ("endpoint pair", &self.endpoints),
        ] {
            let _ = writeln!(s, "{name:<14} {} ± {}", sig6(c.rate), sig6(c.std_error));
        }
        if let Some(ks) = &self.ks {
            let _ = writeln!(
                s,
                "pivot KS test: D = {}, p = {} over {} replicates ({} at level {})",
                sig6(ks.statistic),
                sig6(ks.p_value),
                ks.replicates,
                if ks.passed { "pass" } else { "fail" },
                ks.level
            );
        }
        s
    }
}

/// Repeats small analytic ensembles to measure interval coverage against
/// the exact functional variance `h^T Sigma h`.
pub fn coverage(cfg: &ExperimentConfig) -> Result<CoverageOutcome> {
    let cc = &cfg.coverage;
    let problem = build_problem(cfg)?;
    let op = problem
        .explicit
        .as_ref()
        .ok_or_else(|| Error::Config("coverage needs an explicit operator".into()))?;
    let spec = match cfg.uq.functionals.first() {
        Some(f) => FunctionalSpec::new(f.weights.clone(), f.include_control)?,
        None => FunctionalSpec::new(vec![1.0; problem.m()], true)?,
    };
    let w = spec.effective_weights(&problem.mu)?;
    let sigma = posterior_covariance(op, &problem.noise, &problem.prior, &problem.mu)?;
    let sigma2 = dot(&w, &sigma.apply(&w)?);
    if !(sigma2 > 0.0) {
        return Err(Error::Config("functional has zero posterior variance".into()));
    }
    let sd = sigma2.sqrt();
    let mut ens = EnsembleConfig::new(
        op.clone(),
        problem.prior.clone(),
        problem.noise.clone(),
        problem.mu.clone(),
        cc.members,
        cfg.ensemble.master_seed,
    )?;
    ens.dense_cap = cfg.ensemble.dense_cap;
    let kernel = AnalyticMapKernel::new(op, &problem.noise, &problem.prior, &problem.mu, ens.dense_cap)?;
    let sampler = MemberSampler::new(&ens)?;
    let b2 = problem.prior.variance();
    let m = problem.m();
    let n = problem.n();

    let replicate = |r: usize| -> Result<(f64, bool, bool, bool)> {
        let seed = StreamRng::new(cfg.ensemble.master_seed, domain::REPLICATE, r as u64).derive_seed();
        let s = sampler.reseeded(seed);
        let (mut c_k, mut y_k) = (vec![0.0; m], vec![0.0; n]);
        let mut phis = Vec::with_capacity(cc.members);
        for k in 0..cc.members {
            s.sample_into(k as u64, &mut c_k, &mut y_k);
            let c = kernel.estimate(op, &problem.noise, b2, &problem.mu, &c_k, &y_k)?;
            phis.push(dot(&w, &c));
        }
        let var = empirical_functional_variance(&phis)?;
        let (vlo, vhi) = variance_confidence_interval(var, cc.members, cc.alpha)?;
        let (slo, shi) = sd_confidence_interval(var.sqrt(), cc.members, cc.alpha)?;
        let report = bracketed_report(0.0, var.sqrt(), cc.members, cc.alpha, cc.gamma)?;
        let z = report.z;
        let (lo, hi) = (-z * sd, z * sd);
        let endpoints = report.lower_endpoint_ci.0 <= lo
            && lo <= report.lower_endpoint_ci.1
            && report.upper_endpoint_ci.0 <= hi
            && hi <= report.upper_endpoint_ci.1;
        Ok((
            (cc.members - 1) as f64 * var / sigma2,
            vlo <= sigma2 && sigma2 <= vhi,
            slo <= sd && sd <= shi,
            endpoints,
        ))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.ensemble.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(f64, bool, bool, bool)> =
        pool.install(|| (0..cc.replicates).into_par_iter().map(replicate).collect::<Result<_>>())?;

    let count = |f: fn(&(f64, bool, bool, bool)) -> bool| results.iter().filter(|r| f(r)).count();
    let ks = if cc.ks_replicates >= 2 {
        let pivots: Vec<f64> = results.iter().take(cc.ks_replicates).map(|r| r.0).collect();
        let dof = (cc.members - 1) as f64;
        let (statistic, p_value) = ks_test(&pivots, |x| chi2_cdf(dof, x))?;
        Some(KsOutcome {
            replicates: pivots.len(),
            statistic,
            p_value,
            level: cc.ks_level,
            passed: p_value > cc.ks_level,
        })
    } else {
        None
    };
    Ok(CoverageOutcome {
        members: cc.members,
        replicates: cc.replicates,
        alpha: cc.alpha,
        gamma: cc.gamma,
        sigma2_true: sigma2,
        variance_ci: Coverage::new(count(|r| r.1), results.len()),
        sd_ci: Coverage::new(count(|r| r.2), results.len()),
        endpoints: Coverage::new(count(|r| r.3), results.len()),
        ks,
    })
}

pub fn write_coverage(outcome: &CoverageOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("coverage.json"), outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub members: usize,
    pub requested_members: usize,
    pub nonconverged: Vec<usize>,
    pub max_iterations: Option<usize>,
    pub operator_fingerprint: String,
}

pub fn ensemble_run(cfg: &ExperimentConfig) -> Result<EnsembleRun> {
    let problem = build_problem(cfg)?;
    run_ensemble(&problem.ensemble_config(cfg)?)
}

pub fn write_ensemble_run(run: &EnsembleRun, dir: &Path) -> Result<EnsembleSummary> {
    fs::create_dir_all(dir)?;
    save_store(&run.store, dir.join("ensemble.ens"))?;
    let meta = run.store.metadata();
    let summary = EnsembleSummary {
        members: meta.members,
        requested_members: meta.requested_members,
        nonconverged: run.nonconverged.clone(),
        max_iterations: run.reports.iter().map(|r| r.iterations).max(),
        operator_fingerprint: meta.operator_fingerprint.clone(),
    };
    write_json(&dir.join("ensemble_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub label: String,
    pub report: FunctionalUQReport,
    pub sigma_prior: f64,
    pub pct_reduction_point: f64,
    pub pct_reduction_inflated: f64,
}

/// Post-hoc reports from a saved ensemble.
///
/// `phi_map` comes from the functional entry, else from the central MAP
/// file, else the ensemble mean is used with a warning.
pub fn report(cfg: &ExperimentConfig, store: &EnsembleStore) -> Result<Vec<ReportEntry>> {
    let m = store.dim();
    let mu = store.control();
    let central = match &cfg.report.central {
        Some(p) => {
            let c = read_vector_csv(p)?;
            if c.len() != m {
                return Err(Error::Config(format!("central MAP has length {}, expected {m}", c.len())));
            }
            Some(c)
        }
        None => None,
    };
    let prior = PriorSpec::new(vec![1.0; m], store.metadata().b2)?;
    let specs: Vec<(String, FunctionalSpec, Option<f64>)> = if cfg.uq.functionals.is_empty() {
        let agg = cfg.uq.aggregate.clone().unwrap_or_else(|| AggregateSpec {
            areas: vec![1.0],
            buckets: vec![crate::config::BucketSpec {
                label: "all".into(),
                ranges: vec![(0, m)],
            }],
        });
        agg.weights(m)?
            .into_iter()
            .map(|(l, w)| Ok((l, FunctionalSpec::new(w, true)?, None)))
            .collect::<Result<_>>()?
    } else {
        cfg.uq
            .functionals
            .iter()
            .map(|f| {
                if f.weights.len() != m {
                    return Err(Error::Config(format!(
                        "functional {:?} has {} weights, store has m = {m}",
                        f.label,
                        f.weights.len()
                    )));
                }
                Ok((f.label.clone(), FunctionalSpec::new(f.weights.clone(), f.include_control)?, f.phi_map))
            })
            .collect::<Result<_>>()?
    };
    let mut out = Vec::new();
    for (label, spec, given) in specs {
        let phis = functional_values(store, &spec)?;
        let phi_bar = crate::stats::mean(&phis);
        let phi_map = match (given, &central) {
            (Some(v), _) => v,
            (None, Some(c)) => spec.evaluate(c, mu)?,
            (None, None) => {
                log::warn!("{label}: no central MAP given; using the ensemble mean");
                phi_bar
            }
        };
        let report = functional_report(store, &spec, phi_map, cfg.uq.alpha, cfg.uq.gamma)?;
        let sigma_prior = prior_functional_sd(&spec, mu, &prior, cfg.uq.prior_sd)?;
        let row = TimeseriesRow {
            label: label.clone(),
            report: report.clone(),
            sigma_prior,
        };
        out.push(ReportEntry {
            pct_reduction_point: row.pct_reduction_point(),
            pct_reduction_inflated: row.pct_reduction_inflated(),
            label,
            report,
            sigma_prior,
        });
    }
    Ok(out)
}

pub fn write_report(entries: &[ReportEntry], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), entries)?;
    let rows: Vec<TimeseriesRow> = entries
        .iter()
        .map(|e| TimeseriesRow {
            label: e.label.clone(),
            report: e.report.clone(),
            sigma_prior: e.sigma_prior,
        })
        .collect();
    save_timeseries_csv(dir.join("report.csv"), &rows)
}
