//! Observation operators `y = A (c ∘ mu) + z`, their priors and noise models.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::{dot, norm2, LinearMap, Matrix};
use crate::rng::{domain, StreamRng};

/// `out = A x` or `out = A^T w` for a matrix-free operator.
pub type OperatorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Number of random probe pairs used to validate matrix-free adjoints.
pub const ADJOINT_PROBES: usize = 32;
/// Relative tolerance for the adjoint identity `<A v, w> = <v, A^T w>`.
pub const ADJOINT_TOLERANCE: f64 = 1e-10;

/// A black-box linear map with a user-supplied adjoint.
#[derive(Clone)]
pub struct MatrixFreeOperator {
    input_dim: usize,
    output_dim: usize,
    apply: OperatorFn,
    adjoint: OperatorFn,
    /// Held while calling into operators that are not reentrant.
    serial: Option<Arc<Mutex<()>>>,
}

impl MatrixFreeOperator {
    pub fn is_reentrant(&self) -> bool {
        self.serial.is_none()
    }
}

impl fmt::Debug for MatrixFreeOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatrixFreeOperator")
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .field("reentrant", &self.is_reentrant())
            .finish()
    }
}

impl LinearMap for MatrixFreeOperator {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let _guard = self.serial.as_ref().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()));
        (self.apply)(x, out)
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        let _guard = self.serial.as_ref().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()));
        (self.adjoint)(w, out)
    }
}

#[derive(Debug, Clone)]
pub enum LinearPart {
    Explicit(Matrix),
    MatrixFree(MatrixFreeOperator),
}

/// The affine observation model `f(c; mu) = A (c ∘ mu) + z`.
///
/// `A` maps parameter space (dimension `m`) to observation space
/// (dimension `n`). The operator is immutable once built.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    linear: LinearPart,
    offset: Vec<f64>,
}

impl ForwardOperator {
    pub fn explicit(matrix: Matrix) -> Self {
        let n = matrix.rows();
        Self {
            linear: LinearPart::Explicit(matrix),
            offset: vec![0.0; n],
        }
    }

    /// Registers a matrix-free operator, rejecting it if the supplied adjoint
    /// is inconsistent on [`ADJOINT_PROBES`] random probe pairs.
    pub fn matrix_free(
        input_dim: usize,
        output_dim: usize,
        apply: OperatorFn,
        adjoint: OperatorFn,
        reentrant: bool,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument(
                "operator dimensions must be positive".into(),
            ));
        }
        let op = Self {
            linear: LinearPart::MatrixFree(MatrixFreeOperator {
                input_dim,
                output_dim,
                apply,
                adjoint,
                serial: (!reentrant).then(|| Arc::new(Mutex::new(()))),
            }),
            offset: vec![0.0; output_dim],
        };
        let rel = op.adjoint_consistency(ADJOINT_PROBES, 0)?;
        if !(rel <= ADJOINT_TOLERANCE) {
            return Err(Error::AdjointMismatch {
                rel_error: rel,
                tolerance: ADJOINT_TOLERANCE,
            });
        }
        Ok(op)
    }

    /// Wraps an explicit matrix as an opaque matrix-free operator.
    pub fn matrix_free_from(matrix: Matrix) -> Result<Self> {
        let (n, m) = matrix.shape();
        let fwd = Arc::new(matrix);
        let adj = Arc::clone(&fwd);
        Self::matrix_free(
            m,
            n,
            Arc::new(move |x, out| fwd.apply_into(x, out)),
            Arc::new(move |w, out| adj.adjoint_into(w, out)),
            true,
        )
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        ensure_len("ForwardOperator offset", &offset, self.output_dim())?;
        ensure_finite("ForwardOperator offset", &offset)?;
        self.offset = offset;
        Ok(self)
    }

    pub fn linear_part(&self) -> &LinearPart {
        &self.linear
    }

    pub fn matrix(&self) -> Option<&Matrix> {
        match &self.linear {
            LinearPart::Explicit(m) => Some(m),
            LinearPart::MatrixFree(_) => None,
        }
    }

    pub fn is_reentrant(&self) -> bool {
        match &self.linear {
            LinearPart::Explicit(_) => true,
            LinearPart::MatrixFree(op) => op.is_reentrant(),
        }
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Parameter dimension `m`.
    pub fn m(&self) -> usize {
        self.input_dim()
    }

    /// Observation dimension `n`.
    pub fn n(&self) -> usize {
        self.output_dim()
    }

    /// Largest relative violation of `<A v, w> = <v, A^T w>` over random probes,
    /// each normalized by the Cauchy–Schwarz scale `||A v|| ||w||`.
    pub fn adjoint_consistency(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = StreamRng::new(seed, domain::PROBE, 0);
        let mut v = vec![0.0; self.m()];
        let mut w = vec![0.0; self.n()];
        let mut worst = 0.0f64;
        for _ in 0..probes {
            rng.fill_normal(&mut v);
            rng.fill_normal(&mut w);
            let av = self.apply(&v)?;
            let atw = self.adjoint(&w)?;
            ensure_finite("operator output", &av)?;
            ensure_finite("adjoint output", &atw)?;
            let lhs = dot(&av, &w);
            let rhs = dot(&v, &atw);
            let scale = (norm2(&av) * norm2(&w)).max(norm2(&v) * norm2(&atw));
            let rel = if scale == 0.0 {
                (lhs - rhs).abs()
            } else {
                (lhs - rhs).abs() / scale
            };
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    /// Short content hash: dimensions, the response to fixed probes, and `z`.
    pub fn fingerprint(&self) -> String {
        let mut rng = StreamRng::new(0x00f1_6e55, domain::PROBE, 1);
        let mut v = vec![0.0; self.m()];
        let mut w = vec![0.0; self.n()];
        rng.fill_normal(&mut v);
        rng.fill_normal(&mut w);
        let mut av = vec![0.0; self.n()];
        let mut atw = vec![0.0; self.m()];
        self.apply_into(&v, &mut av);
        self.adjoint_into(&w, &mut atw);
        let mut h = Sha256::new();
        h.update((self.m() as u64).to_le_bytes());
        h.update((self.n() as u64).to_le_bytes());
        for x in av.iter().chain(&atw).chain(&self.offset) {
            h.update(x.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl LinearMap for ForwardOperator {
    fn input_dim(&self) -> usize {
        match &self.linear {
            LinearPart::Explicit(m) => m.cols(),
            LinearPart::MatrixFree(op) => op.input_dim,
        }
    }

    fn output_dim(&self) -> usize {
        match &self.linear {
            LinearPart::Explicit(m) => m.rows(),
            LinearPart::MatrixFree(op) => op.output_dim,
        }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.linear {
            LinearPart::Explicit(m) => m.apply_into(x, out),
            LinearPart::MatrixFree(op) => op.apply_into(x, out),
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        match &self.linear {
            LinearPart::Explicit(m) => m.adjoint_into(w, out),
            LinearPart::MatrixFree(op) => op.adjoint_into(w, out),
        }
    }
}

/// Gaussian prior `c ~ N(c^b, b^2 I)` on the scaling factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    mean: Vec<f64>,
    variance: f64,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive and finite, got {variance}"
            )));
        }
        ensure_finite("prior mean", &mean)?;
        Ok(Self { mean, variance })
    }

    /// Prior centred on unit scaling factors.
    pub fn unit_mean(m: usize, variance: f64) -> Result<Self> {
        Self::new(vec![1.0; m], variance)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `b^2`.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Diagonal observation-error covariance `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    variances: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "noise variance {i} is {v}, must be positive and finite"
            )));
        }
        Ok(Self { variances })
    }

    pub fn isotropic(n: usize, variance: f64) -> Result<Self> {
        Self::new(vec![variance; n])
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    /// Diagonal of `R^{-1}`.
    pub fn precisions(&self) -> Vec<f64> {
        self.variances.iter().map(|v| 1.0 / v).collect()
    }

    /// `R^{-1} r`, exploiting the diagonal.
    pub fn whiten(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.variances).map(|(x, v)| x / v).collect()
    }
}

/// `y = ỹ - z`.
pub fn debias_observations(y_tilde: &[f64], op: &ForwardOperator) -> Result<Vec<f64>> {
    ensure_len("debias_observations", y_tilde, op.n())?;
    Ok(y_tilde.iter().zip(op.offset()).map(|(y, z)| y - z).collect())
}

/// The 2x2 mixing operator `[[1-ε, ε], [ε, 1-ε]]` of the low-dimensional example.
pub fn toy_operator(epsilon: f64) -> Result<ForwardOperator> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let a = Matrix::new(2, 2, vec![1.0 - epsilon, epsilon, epsilon, 1.0 - epsilon])?;
    Ok(ForwardOperator::explicit(a))
}

/// A synthetic operator together with its 2-norm condition number.
#[derive(Debug, Clone)]
pub struct SyntheticOperator {
    pub operator: ForwardOperator,
    pub condition_number: f64,
}

/// Row-stochastic smoothing kernels standing in for an averaging-kernel
/// transport operator.
///
/// Parameters live on the grid `g_j = j/(m-1)` of `[0, 1]`. Observation `i`
/// is centred at `i/(n-1)` plus a seeded jitter of at most a quarter of the
/// observation spacing, and sees a Gaussian bump of width
/// `smoothness * (0.5 + u_i)` with `u_i` uniform. Each row is normalized to
/// sum to one. A zero width gives a one-hot row at the nearest grid point, so
/// `n = m` and `smoothness -> 0` approach the identity.
pub fn synthetic_operator(
    m: usize,
    n: usize,
    smoothness: f64,
    seed: u64,
) -> Result<SyntheticOperator> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic operator dimensions must be positive".into(),
        ));
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothness must be non-negative, got {smoothness}"
        )));
    }
    let grid = |j: usize| if m == 1 { 0.0 } else { j as f64 / (m - 1) as f64 };
    let obs_spacing = if n == 1 { 0.0 } else { 1.0 / (n - 1) as f64 };
    let mut rng = StreamRng::new(seed, domain::SYNTHETIC_OPERATOR, 0);
    let mut a = Matrix::zeros(n, m);
    for i in 0..n {
        let base = if n == 1 { 0.5 } else { i as f64 * obs_spacing };
        let centre = (base + (rng.uniform() - 0.5) * 0.5 * obs_spacing).clamp(0.0, 1.0);
        let width = smoothness * (0.5 + rng.uniform());
        let dist2: Vec<f64> = (0..m).map(|j| (grid(j) - centre).powi(2)).collect();
        let (nearest, d_min) = dist2
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("m >= 1");
        let row = a.row_mut(i);
        if width == 0.0 {
            row[nearest] = 1.0;
            continue;
        }
        let two_w2 = 2.0 * width * width;
        for (r, d) in row.iter_mut().zip(&dist2) {
            *r = (-(d - d_min) / two_w2).exp();
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= total);
    }
    let condition_number = a.condition_number();
    Ok(SyntheticOperator {
        operator: ForwardOperator::explicit(a),
        condition_number,
    })
}

/// Writes one matrix row per line in full-precision scientific notation.
pub fn write_matrix_csv(path: impl AsRef<Path>, matrix: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for i in 0..matrix.rows() {
        let line: Vec<String> = matrix.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("line {}: {s:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Reads a single column (or single row) of numbers as a vector.
pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let m = read_matrix_csv(path)?;
    if m.rows() == 1 || m.cols() == 1 {
        Ok(m.into_vec())
    } else {
        Err(Error::InvalidArgument(format!(
            "expected a vector, found a {}x{} matrix",
            m.rows(),
            m.cols()
        )))
    }
}
