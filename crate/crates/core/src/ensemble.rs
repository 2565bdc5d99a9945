//! Monte Carlo ensemble of MAP estimators.
//!
//! Member `k` draws a perturbed prior mean `c_k ~ N(1, b^2 I)` and a perturbed
//! observation `y_k = A mu + eps_k`, `eps_k ~ N(0, R)`, then solves for its MAP
//! estimator. The covariance of the resulting estimators equals the posterior
//! covariance, so any linear functional's posterior variance can be estimated
//! from the stored ensemble after the fact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::forward::{ForwardOperator, NoiseSpec, PriorSpec};
use crate::linalg::{LinearMap, Matrix};
use crate::posterior::{AnalyticMapKernel, DEFAULT_DENSE_CAP};
use crate::rng::{domain, StreamRng};
use crate::solver::{minimize, FourDVarCost, LbfgsConfig, SolverReport};
use crate::stats::sample_covariance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    /// Closed-form MAP estimator; needs an explicit matrix.
    Analytic,
    /// L-BFGS on the 4D-Var cost; works with matrix-free operators.
    Variational,
}

impl std::fmt::Display for SolverChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverChoice::Analytic => "analytic",
            SolverChoice::Variational => "variational",
        })
    }
}

/// What to do with variational members whose solver did not converge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailurePolicy {
    /// Largest tolerated fraction of non-converged members.
    pub max_fraction: f64,
    /// Drop tolerated non-converged members from the store instead of keeping
    /// their last iterate.
    pub exclude: bool,
}

impl Default for FailurePolicy {
    fn default() -> Self {
        Self {
            max_fraction: 0.0,
            exclude: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub members: usize,
    pub master_seed: u64,
    pub solver: SolverChoice,
    pub lbfgs: LbfgsConfig,
    pub prior: PriorSpec,
    pub noise: NoiseSpec,
    pub mu: Vec<f64>,
    pub operator: ForwardOperator,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub failure_policy: FailurePolicy,
    pub dense_cap: usize,
    /// Recorded verbatim in the store metadata.
    pub created_unix: u64,
}

impl EnsembleConfig {
    pub fn new(
        operator: ForwardOperator,
        prior: PriorSpec,
        noise: NoiseSpec,
        mu: Vec<f64>,
        members: usize,
        master_seed: u64,
    ) -> Result<Self> {
        // analytic when the operator has an explicit matrix
        let solver = if operator.matrix().is_some() {
            SolverChoice::Analytic
        } else {
            SolverChoice::Variational
        };
        let cfg = Self {
            members,
            master_seed,
            solver,
            lbfgs: LbfgsConfig::default(),
            prior,
            noise,
            mu,
            operator,
            workers: 0,
            failure_policy: FailurePolicy::default(),
            dense_cap: DEFAULT_DENSE_CAP,
            created_unix: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_solver(mut self, solver: SolverChoice) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: self.members,
            });
        }
        let m = self.operator.m();
        ensure_len("ensemble control mu", &self.mu, m)?;
        if self.prior.dim() != m {
            return Err(Error::dim("ensemble prior mean", m, self.prior.dim()));
        }
        if self.noise.dim() != self.operator.n() {
            return Err(Error::dim("ensemble noise", self.operator.n(), self.noise.dim()));
        }
        if !(0.0..=1.0).contains(&self.failure_policy.max_fraction) {
            return Err(Error::InvalidArgument(
                "failure fraction must lie in [0, 1]".into(),
            ));
        }
        if self.solver == SolverChoice::Analytic && self.operator.matrix().is_none() {
            return Err(Error::Unsupported(
                "analytic ensemble needs an explicit operator matrix".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `(c_k, y_k)` for any member from its own counter-based stream.
#[derive(Debug, Clone)]
pub struct MemberSampler {
    seed: u64,
    m: usize,
    prior_sd: f64,
    noise_sd: Vec<f64>,
    /// `A mu`, computed once.
    a_mu: Vec<f64>,
}

impl MemberSampler {
    pub fn new(cfg: &EnsembleConfig) -> Result<Self> {
        let a_mu = cfg.operator.apply(&cfg.mu)?;
        Ok(Self {
            seed: cfg.master_seed,
            m: cfg.operator.m(),
            prior_sd: cfg.prior.sd(),
            noise_sd: cfg.noise.variances().iter().map(|v| v.sqrt()).collect(),
            a_mu,
        })
    }

    /// The same problem under another master seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn predicted_control(&self) -> &[f64] {
        &self.a_mu
    }

    /// `c_k` is drawn first, then `eps_k`, all from stream `k`.
    pub fn sample_into(&self, k: u64, prior_mean: &mut [f64], observation: &mut [f64]) {
        let mut rng = StreamRng::new(self.seed, domain::ENSEMBLE_MEMBER, k);
        for c in prior_mean.iter_mut() {
            *c = 1.0 + self.prior_sd * rng.standard_normal();
        }
        for ((y, base), sd) in observation.iter_mut().zip(&self.a_mu).zip(&self.noise_sd) {
            *y = base + sd * rng.standard_normal();
        }
    }

    pub fn sample(&self, k: u64) -> (Vec<f64>, Vec<f64>) {
        let mut c = vec![0.0; self.m];
        let mut y = vec![0.0; self.a_mu.len()];
        self.sample_into(k, &mut c, &mut y);
        (c, y)
    }
}

/// `(c_k, y_k)` for member `k`.
pub fn sample_member_inputs(k: usize, cfg: &EnsembleConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if k >= cfg.members {
        return Err(Error::InvalidArgument(format!(
            "member index {k} out of range for {} members",
            cfg.members
        )));
    }
    Ok(MemberSampler::new(cfg)?.sample(k as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub index: usize,
    pub prior_mean: Vec<f64>,
    pub observation: Vec<f64>,
    pub c_map: Vec<f64>,
    pub solver_report: Option<SolverReport>,
}

/// Recomputes a single member from scratch, exactly as [`run_ensemble`] does.
pub fn compute_member(k: usize, cfg: &EnsembleConfig) -> Result<EnsembleMember> {
    let (prior_mean, observation) = sample_member_inputs(k, cfg)?;
    let (c_map, solver_report) = match cfg.solver {
        SolverChoice::Analytic => {
            let kernel =
                AnalyticMapKernel::new(&cfg.operator, &cfg.noise, &cfg.prior, &cfg.mu, cfg.dense_cap)?;
            let c = kernel.estimate(
                &cfg.operator,
                &cfg.noise,
                cfg.prior.variance(),
                &cfg.mu,
                &prior_mean,
                &observation,
            )?;
            (c, None)
        }
        SolverChoice::Variational => {
            let report = solve_member(cfg, &prior_mean, &observation)?;
            (report.solution.clone(), Some(report))
        }
    };
    Ok(EnsembleMember {
        index: k,
        prior_mean,
        observation,
        c_map,
        solver_report,
    })
}

fn solve_member(cfg: &EnsembleConfig, prior_mean: &[f64], observation: &[f64]) -> Result<SolverReport> {
    let cost = FourDVarCost::new(
        &cfg.operator,
        &cfg.noise,
        cfg.prior.variance(),
        prior_mean,
        observation,
        &cfg.mu,
    )?;
    Ok(minimize(prior_mean, &cost, &cfg.lbfgs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    /// Rows in the member array.
    pub members: usize,
    /// Members originally requested; differs from `members` only when
    /// non-converged members were excluded.
    pub requested_members: usize,
    pub m: usize,
    pub n: usize,
    pub b2: f64,
    pub master_seed: u64,
    pub solver: SolverChoice,
    pub operator_fingerprint: String,
    pub created_unix: u64,
    /// Indices of excluded members, ascending.
    #[serde(default)]
    pub excluded: Vec<usize>,
}

/// The persisted result of a run: `M` MAP estimators plus the control `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStore {
    metadata: StoreMetadata,
    members: Matrix,
    control: Vec<f64>,
}

impl EnsembleStore {
    pub fn new(metadata: StoreMetadata, members: Matrix, control: Vec<f64>) -> Result<Self> {
        let inconsistent = |msg: String| Err(Error::Store(crate::StoreError::MetadataInconsistent(msg)));
        if members.rows() != metadata.members || members.cols() != metadata.m {
            return inconsistent(format!(
                "metadata says {}x{}, member array is {}x{}",
                metadata.members,
                metadata.m,
                members.rows(),
                members.cols()
            ));
        }
        if control.len() != metadata.m {
            return inconsistent(format!(
                "control has length {}, expected {}",
                control.len(),
                metadata.m
            ));
        }
        if metadata.members < 2 {
            return inconsistent(format!("{} members, need at least 2", metadata.members));
        }
        if metadata.requested_members != metadata.members + metadata.excluded.len()
            || metadata.excluded.windows(2).any(|w| w[0] >= w[1])
            || metadata.excluded.last().is_some_and(|&k| k >= metadata.requested_members)
        {
            return inconsistent("excluded member list does not match member counts".into());
        }
        if !(metadata.b2 > 0.0 && metadata.b2.is_finite()) {
            return inconsistent("prior variance must be positive".into());
        }
        if members.as_slice().iter().chain(&control).any(|v| !v.is_finite()) {
            return inconsistent("non-finite value in member array or control".into());
        }
        Ok(Self {
            metadata,
            members,
            control,
        })
    }

    pub fn metadata(&self) -> &StoreMetadata {
        &self.metadata
    }

    /// `M x m`, row `k` is `c_MAP^k`.
    pub fn members(&self) -> &Matrix {
        &self.members
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    pub fn len(&self) -> usize {
        self.members.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.members.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.members.cols()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub store: EnsembleStore,
    /// Per-member solver reports, in member order; empty for the analytic path.
    pub reports: Vec<SolverReport>,
    /// Indices of members whose solver did not converge.
    pub nonconverged: Vec<usize>,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

/// Runs all members and collects their MAP estimators.
///
/// Members are written into preallocated rows by index, so the result does
/// not depend on the worker count.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleRun> {
    cfg.validate()?;
    let m = cfg.operator.m();
    let total = cfg.members;
    let sampler = MemberSampler::new(cfg)?;
    let workers = if cfg.operator.is_reentrant() {
        cfg.workers
    } else {
        if cfg.workers != 1 {
            log::info!("operator is not reentrant; running members on one worker");
        }
        1
    };
    let pool = build_pool(workers)?;
    let mut values = vec![0.0; total * m];

    let (reports, nonconverged) = match cfg.solver {
        SolverChoice::Analytic => {
            let kernel =
                AnalyticMapKernel::new(&cfg.operator, &cfg.noise, &cfg.prior, &cfg.mu, cfg.dense_cap)?;
            let b2 = cfg.prior.variance();
            pool.install(|| {
                values
                    .par_chunks_mut(m)
                    .enumerate()
                    .try_for_each(|(k, row)| -> Result<()> {
                        let (c_k, y_k) = sampler.sample(k as u64);
                        let c = kernel.estimate(&cfg.operator, &cfg.noise, b2, &cfg.mu, &c_k, &y_k)?;
                        if c.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite("ensemble member MAP estimate"));
                        }
                        row.copy_from_slice(&c);
                        Ok(())
                    })
            })?;
            (Vec::new(), Vec::new())
        }
        SolverChoice::Variational => {
            let mut slots: Vec<Option<SolverReport>> = vec![None; total];
            pool.install(|| {
                values
                    .par_chunks_mut(m)
                    .zip(slots.par_iter_mut())
                    .enumerate()
                    .try_for_each(|(k, (row, slot))| -> Result<()> {
                        let (c_k, y_k) = sampler.sample(k as u64);
                        let report = solve_member(cfg, &c_k, &y_k)?;
                        row.copy_from_slice(&report.solution);
                        *slot = Some(report);
                        Ok(())
                    })
            })?;
            let reports: Vec<SolverReport> = slots.into_iter().flatten().collect();
            let nonconverged: Vec<usize> = reports
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.converged || r.solution.iter().any(|v| !v.is_finite()))
                .map(|(k, _)| k)
                .collect();
            (reports, nonconverged)
        }
    };

    let allowed = (cfg.failure_policy.max_fraction * total as f64).floor() as usize;
    if nonconverged.len() > allowed {
        return Err(Error::EnsembleFailures {
            failed: nonconverged.len(),
            total,
            allowed,
        });
    }
    let nonfinite_kept = nonconverged
        .iter()
        .any(|&k| values[k * m..(k + 1) * m].iter().any(|v| !v.is_finite()));
    let excluded = if !nonconverged.is_empty() {
        log::warn!(
            "{} of {} members did not converge (tolerated: {})",
            nonconverged.len(),
            total,
            allowed
        );
        if cfg.failure_policy.exclude || nonfinite_kept {
            nonconverged.clone()
        } else {
            Vec::new()
        }
    } else {
        Vec::new()
    };
    let kept: Vec<f64> = if excluded.is_empty() {
        values
    } else {
        values
            .chunks(m)
            .enumerate()
            .filter(|(k, _)| excluded.binary_search(k).is_err())
            .flat_map(|(_, row)| row.iter().copied())
            .collect()
    };
    let rows = total - excluded.len();
    let metadata = StoreMetadata {
        members: rows,
        requested_members: total,
        m,
        n: cfg.operator.n(),
        b2: cfg.prior.variance(),
        master_seed: cfg.master_seed,
        solver: cfg.solver,
        operator_fingerprint: cfg.operator.fingerprint(),
        created_unix: cfg.created_unix,
        excluded,
    };
    let store = EnsembleStore::new(metadata, Matrix::new(rows, m, kept)?, cfg.mu.clone())?;
    Ok(EnsembleRun {
        store,
        reports,
        nonconverged,
    })
}

/// `Sigma_hat`, the two-pass sample covariance of the member rows.
pub fn empirical_covariance(store: &EnsembleStore, dense_cap: usize) -> Result<Matrix> {
    if store.dim() > dense_cap {
        return Err(Error::Unsupported(format!(
            "empirical covariance of dimension {} exceeds the dense cap {dense_cap}; \
             evaluate functionals instead",
            store.dim()
        )));
    }
    sample_covariance(store.members())
}

/// Row `k` is `c_MAP^k ∘ mu`.
pub fn flux_members(store: &EnsembleStore) -> Matrix {
    let mut out = store.members().clone();
    for k in 0..out.rows() {
        out.row_mut(k)
            .iter_mut()
            .zip(store.control())
            .for_each(|(v, mu)| *v *= mu);
    }
    out
}
