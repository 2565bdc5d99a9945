//! Experiment configuration: one JSON document, with dotted-path overrides.
//!
//! Loading layers, later wins: built-in defaults, per-command defaults, the
//! config file, then `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ensemble::{FailurePolicy, SolverChoice};
use crate::error::{Error, Result};
use crate::posterior::DEFAULT_DENSE_CAP;
use crate::solver::LbfgsConfig;
use crate::uq::PriorSdConvention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Toy,
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub operator: OperatorKind,
    /// Parameter dimension for synthetic operators.
    pub m: usize,
    /// Observation dimension for synthetic operators.
    pub n: usize,
    pub epsilon: f64,
    pub smoothness: f64,
    /// Seed for the synthetic operator's structure.
    pub operator_seed: u64,
    /// CSV matrix for `operator = "file"`.
    pub path: Option<PathBuf>,
    /// Optional CSV offset `z`.
    pub offset_path: Option<PathBuf>,
    /// Hide the matrix behind apply/adjoint closures.
    pub matrix_free: bool,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            operator: OperatorKind::Toy,
            m: 2,
            n: 2,
            epsilon: 0.05,
            smoothness: 0.03,
            operator_seed: 0,
            path: None,
            offset_path: None,
            matrix_free: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub b2: f64,
    /// Defaults to all ones.
    pub mean: Option<Vec<f64>>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { b2: 4.0, mean: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub variance: f64,
    /// Per-observation variances; overrides `variance`.
    pub variances: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            variance: 1.0,
            variances: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mu: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
}

/// Truth used to simulate the central observation. Either flux `theta` or
/// scaling factors; the default is scaling factors of one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub theta: Option<Vec<f64>>,
    pub scaling: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: usize,
    pub master_seed: u64,
    pub solver: SolverChoice,
    /// 0 uses every core.
    pub workers: usize,
    pub failure: FailurePolicy,
    pub dense_cap: usize,
    pub created_unix: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            members: 1000,
            master_seed: 1,
            solver: SolverChoice::Analytic,
            workers: 0,
            failure: FailurePolicy::default(),
            dense_cap: DEFAULT_DENSE_CAP,
            created_unix: 0,
        }
    }
}

/// Area-weighted means over abstract grid cells with uniform time weights.
///
/// Parameters are laid out time-major: index `t * cells + j` is cell `j` at
/// time step `t`, with `cells = areas.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSpec {
    pub areas: Vec<f64>,
    pub buckets: Vec<BucketSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub label: String,
    /// Half-open time-step ranges `[start, end)`.
    pub ranges: Vec<(usize, usize)>,
}

impl AggregateSpec {
    /// `cells` equal areas and one bucket per time step, plus one over all.
    pub fn monthly(cells: usize, steps: usize, areas: Option<Vec<f64>>) -> Self {
        let mut buckets: Vec<BucketSpec> = (0..steps)
            .map(|t| BucketSpec {
                label: format!("t{:02}", t + 1),
                ranges: vec![(t, t + 1)],
            })
            .collect();
        buckets.push(BucketSpec {
            label: "all".into(),
            ranges: vec![(0, steps)],
        });
        Self {
            areas: areas.unwrap_or_else(|| vec![1.0; cells]),
            buckets,
        }
    }

    /// Weight vectors, one per bucket, for a parameter of dimension `m`.
    pub fn weights(&self, m: usize) -> Result<Vec<(String, Vec<f64>)>> {
        let cells = self.areas.len();
        if cells == 0 || self.areas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config("aggregate areas must be positive".into()));
        }
        if !m.is_multiple_of(cells) {
            return Err(Error::Config(format!(
                "parameter dimension {m} is not a multiple of {cells} cells"
            )));
        }
        let steps = m / cells;
        let total_area: f64 = self.areas.iter().sum();
        let mut out = Vec::with_capacity(self.buckets.len());
        for bucket in &self.buckets {
            let mut used = vec![false; steps];
            for &(start, end) in &bucket.ranges {
                if start >= end || end > steps {
                    return Err(Error::Config(format!(
                        "bucket {:?}: range [{start}, {end}) outside [0, {steps})",
                        bucket.label
                    )));
                }
                for u in &mut used[start..end] {
                    if *u {
                        return Err(Error::Config(format!(
                            "bucket {:?}: overlapping ranges",
                            bucket.label
                        )));
                    }
                    *u = true;
                }
            }
            let count = used.iter().filter(|u| **u).count();
            if count == 0 {
                return Err(Error::Config(format!("bucket {:?} is empty", bucket.label)));
            }
            let mut w = vec![0.0; m];
            for (t, _) in used.iter().enumerate().filter(|(_, u)| **u) {
                for (j, area) in self.areas.iter().enumerate() {
                    w[t * cells + j] = area / total_area / count as f64;
                }
            }
            out.push((bucket.label.clone(), w));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalConfig {
    pub label: String,
    pub weights: Vec<f64>,
    /// Weights apply to fluxes `c ∘ mu`.
    #[serde(default = "yes")]
    pub include_control: bool,
    /// Central-inversion value, for post-hoc reports.
    #[serde(default)]
    pub phi_map: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub prior_sd: PriorSdConvention,
    pub functionals: Vec<FunctionalConfig>,
    pub aggregate: Option<AggregateSpec>,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            gamma: 0.05,
            prior_sd: PriorSdConvention::Model,
            functionals: Vec::new(),
            aggregate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorsConfig {
    pub members: Vec<usize>,
    pub alpha: f64,
}

impl Default for FactorsConfig {
    fn default() -> Self {
        Self {
            members: vec![10, 100, 1_000, 10_000, 100_000, 1_000_000],
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub members: usize,
    pub replicates: usize,
    /// Replicates used for the goodness-of-fit test of the pivot.
    pub ks_replicates: usize,
    pub ks_level: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            members: 30,
            replicates: 10_000,
            ks_replicates: 2_000,
            ks_level: 0.01,
            alpha: 0.05,
            gamma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// `.ens` file to analyse.
    pub ensemble: Option<PathBuf>,
    /// CSV with the central MAP scaling factors.
    pub central: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub save_ensemble: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            save_ensemble: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub prior: PriorConfig,
    pub noise: NoiseConfig,
    pub control: ControlConfig,
    pub truth: TruthConfig,
    pub ensemble: EnsembleSection,
    pub lbfgs: LbfgsConfig,
    pub uq: UqConfig,
    pub factors: FactorsConfig,
    pub coverage: CoverageConfig,
    pub report: ReportConfig,
    pub output: OutputConfig,
}

/// Which command the defaults are for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Toy2d,
    Factors,
    Synthetic,
    Coverage,
    Ensemble,
    Report,
}

fn command_defaults(command: Command) -> Value {
    match command {
        Command::Toy2d => serde_json::json!({
            "control": {"mu": [0.5, 1.0]},
            "truth": {"theta": [1.0, 2.0]},
            "ensemble": {"members": 1_000_000},
            "output": {"save_ensemble": false},
        }),
        Command::Synthetic => serde_json::json!({
            "problem": {"operator": "synthetic", "m": 48, "n": 200},
            "ensemble": {"members": 60, "solver": "variational"},
        }),
        Command::Coverage => serde_json::json!({
            "control": {"mu": [0.5, 1.0]},
        }),
        _ => Value::Object(Map::new()),
    }
}

/// Recursively overlays `top` on `base`; non-objects replace.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string. Numeric segments index into arrays.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for seg in path.split('.') {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = match node {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| Error::Config(format!("{path}: {seg:?} is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("{path}: index {i} out of range ({len})")))?
            }
            _ => return Err(Error::Config(format!("{path}: {seg:?} descends into a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

impl ExperimentConfig {
    pub fn defaults(command: Command) -> Self {
        Self::from_layers(command, None, &[]).expect("built-in defaults are valid")
    }

    /// Builds a config from defaults, an optional JSON document, and overrides.
    pub fn from_layers(command: Command, document: Option<Value>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("default config serializes");
        merge(&mut doc, command_defaults(command));
        if let Some(d) = document {
            if !d.is_object() {
                return Err(Error::Config("config document must be a JSON object".into()));
            }
            merge(&mut doc, d);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(command: Command, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let document = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Some(
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                )
            }
            None => None,
        };
        Self::from_layers(command, document, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let level = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        level("uq.alpha", self.uq.alpha)?;
        level("uq.gamma", self.uq.gamma)?;
        level("factors.alpha", self.factors.alpha)?;
        level("coverage.alpha", self.coverage.alpha)?;
        level("coverage.gamma", self.coverage.gamma)?;
        level("coverage.ks_level", self.coverage.ks_level)?;
        if self.ensemble.members < 2 {
            return Err(Error::Config("ensemble.members must be at least 2".into()));
        }
        if self.coverage.members < 2 {
            return Err(Error::Config("coverage.members must be at least 2".into()));
        }
        if let Some(&bad) = self.factors.members.iter().find(|&&m| m < 2) {
            return Err(Error::Config(format!("factors.members contains {bad} < 2")));
        }
        if !(self.prior.b2 > 0.0 && self.prior.b2.is_finite()) {
            return Err(Error::Config("prior.b2 must be positive".into()));
        }
        if !(self.noise.variance > 0.0 && self.noise.variance.is_finite()) {
            return Err(Error::Config("noise.variance must be positive".into()));
        }
        if self.problem.operator == OperatorKind::File && self.problem.path.is_none() {
            return Err(Error::Config("problem.path is required for a file operator".into()));
        }
        for p in [&self.problem.path, &self.problem.offset_path, &self.control.path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.truth.theta.is_some() && self.truth.scaling.is_some() {
            return Err(Error::Config("set only one of truth.theta and truth.scaling".into()));
        }
        Ok(())
    }
}
