//! Dense row-major matrices and the [`LinearMap`] abstraction shared by
//! explicit and matrix-free operators.
//!
//! Factorizations and eigenvalues are delegated to `nalgebra`; everything the
//! posterior formulas touch directly (products, Hadamard scaling, symmetrizing)
//! is done here on plain row-major storage so that results are reproducible
//! bit for bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{ensure_finite, ensure_len, Error, Result};

/// A linear map `R^input_dim -> R^output_dim` together with its adjoint.
pub trait LinearMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// `out = A x`. Lengths are the caller's responsibility.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    /// `out = A^T w`. Lengths are the caller's responsibility.
    fn adjoint_into(&self, w: &[f64], out: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("LinearMap::apply input", x, self.input_dim())?;
        let mut out = vec![0.0; self.output_dim()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    fn adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        ensure_len("LinearMap::adjoint input", w, self.output_dim())?;
        let mut out = vec![0.0; self.input_dim()];
        self.adjoint_into(w, &mut out);
        Ok(out)
    }
}

impl<T: LinearMap + ?Sized> LinearMap for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).apply_into(x, out)
    }
    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        (**self).adjoint_into(w, out)
    }
}

/// Dense real matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::dim("Matrix::new values", rows * cols, values.len()));
        }
        ensure_finite("Matrix::new", &values)?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            ensure_len("Matrix::from_rows row", row, c)?;
            values.extend_from_slice(row);
        }
        Self::new(r, c, values)
    }

    /// `a b^T`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m[(i, j)] = ai * bj;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("Matrix::matmul inner", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::hadamard",
                self.values.len(),
                other.values.len(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("Matrix::add", self.values.len(), other.values.len()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("Matrix::sub", self.values.len(), other.values.len()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Materializes `A_mu`: column `j` multiplied by `mu[j]`.
    pub fn scale_columns(&self, mu: &[f64]) -> Result<Matrix> {
        ensure_len("Matrix::scale_columns", mu, self.cols)?;
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &s) in out.row_mut(i).iter_mut().zip(mu) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// `(M + M^T) / 2`.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::dim("Matrix::symmetrized", self.rows, self.cols));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute eigenvalue of a symmetric matrix, i.e. its spectral norm.
    pub fn symmetric_operator_norm(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::dim("Matrix::symmetric_operator_norm", self.rows, self.cols));
        }
        let eig = self.to_nalgebra().symmetric_eigen();
        Ok(eig.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    /// Ratio of extreme singular values; infinite when rank deficient.
    pub fn condition_number(&self) -> f64 {
        let svd = self.to_nalgebra().svd(false, false);
        let k = self.rows.min(self.cols);
        let max = svd.singular_values.max();
        let min = if self.rows == self.cols || k == self.cols {
            svd.singular_values.min()
        } else {
            0.0
        };
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        if !self.is_square() {
            return Err(Error::dim("Matrix::cholesky", self.rows, self.cols));
        }
        self.to_nalgebra()
            .cholesky()
            .map(|inner| Cholesky { inner })
            .ok_or_else(|| {
                Error::NotPositiveDefinite(format!("{}x{} Cholesky failed", self.rows, self.cols))
            })
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = m[(i, j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

impl LinearMap for Matrix {
    fn input_dim(&self) -> usize {
        self.cols
    }

    fn output_dim(&self) -> usize {
        self.rows
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &wi) in w.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * wi;
            }
        }
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    inner: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        ensure_len("Cholesky::solve", rhs, self.dim())?;
        let x = self.inner.solve(&DVector::from_column_slice(rhs));
        Ok(x.iter().copied().collect())
    }

    pub fn inverse(&self) -> Matrix {
        Matrix::from_nalgebra(&self.inner.inverse())
    }

    pub fn lower(&self) -> Matrix {
        Matrix::from_nalgebra(&self.inner.l())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `||a - b||_2 / ||b||_2`, falling back to the absolute error when `b = 0`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm2(b);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
