//! Reference implementations shared by the integration tests. Everything here
//! is written with plain loops over `Vec<Vec<f64>>` and deliberately avoids the
//! library's linear algebra.
#![allow(dead_code)]

use std::sync::Arc;

use fluxmc::forward::{ForwardOperator, NoiseSpec, PriorSpec};
use fluxmc::linalg::Matrix;
use fluxmc::rng::StreamRng;

pub type Dense = Vec<Vec<f64>>;

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut aug: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| aug[p][col].abs().total_cmp(&aug[q][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let d = aug[col][col];
        assert!(d != 0.0, "singular matrix");
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        let pivot_row = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            let f = row[col];
            if r != col && f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Solves `a x = b` with the Gauss-Jordan inverse.
pub fn gauss_jordan_solve(a: &Dense, b: &[f64]) -> Vec<f64> {
    let inv = gauss_jordan_inverse(a);
    inv.iter().map(|r| r.iter().zip(b).map(|(x, y)| x * y).sum()).collect()
}

pub fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn to_matrix(d: &Dense) -> Matrix {
    Matrix::from_rows(d).unwrap()
}

/// Posterior precision `sum_i a_ij a_il mu_j mu_l / r_i + delta_jl / b2`.
pub fn precision_loop(a: &Dense, r: &[f64], mu: &[f64], b2: f64) -> Dense {
    let m = mu.len();
    let mut p = vec![vec![0.0; m]; m];
    for j in 0..m {
        for l in 0..m {
            let mut s = 0.0;
            for (i, row) in a.iter().enumerate() {
                s += row[j] * row[l] / r[i];
            }
            p[j][l] = s * mu[j] * mu[l] + if j == l { 1.0 / b2 } else { 0.0 };
        }
    }
    p
}

/// `(A^T R^{-1} y) ∘ mu + c / b2`.
pub fn map_rhs_loop(a: &Dense, r: &[f64], mu: &[f64], y: &[f64], c: &[f64], b2: f64) -> Vec<f64> {
    (0..mu.len())
        .map(|j| {
            let s: f64 = a.iter().enumerate().map(|(i, row)| row[j] * y[i] / r[i]).sum();
            s * mu[j] + c[j] / b2
        })
        .collect()
}

pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_frobenius(a: &Dense, b: &Dense) -> f64 {
    let num: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().flatten().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Random `rows x cols` matrix with standard normal entries.
pub fn random_dense(rng: &mut StreamRng, rows: usize, cols: usize) -> Dense {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.standard_normal()).collect())
        .collect()
}

pub fn random_vec(rng: &mut StreamRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.uniform()).collect()
}

/// A random explicit problem with `m <= 32`, `n <= 64`.
pub struct Instance {
    pub op: ForwardOperator,
    pub a: Dense,
    pub r: Vec<f64>,
    pub noise: NoiseSpec,
    pub prior: PriorSpec,
    pub b2: f64,
    pub mu: Vec<f64>,
}

pub fn explicit_instance(seed: u64) -> Instance {
    let mut rng = StreamRng::new(seed, 100, 0);
    let m = 1 + (rng.next_u64() % 32) as usize;
    let n = 1 + (rng.next_u64() % 64) as usize;
    let a = random_dense(&mut rng, n, m);
    let r = random_vec(&mut rng, n, 0.1, 3.0);
    let mu = random_vec(&mut rng, m, -2.0, 2.0);
    let b2 = 0.2 + 5.0 * rng.uniform();
    let mean = random_vec(&mut rng, m, 0.0, 2.0);
    Instance {
        op: ForwardOperator::explicit(to_matrix(&a)),
        a,
        noise: NoiseSpec::new(r.clone()).unwrap(),
        r,
        prior: PriorSpec::new(mean, b2).unwrap(),
        b2,
        mu,
    }
}

/// A random 4D-Var problem behind a matrix-free operator, with `m <= 64`.
pub struct ImplicitProblem {
    pub op: ForwardOperator,
    pub a: Dense,
    pub r: Vec<f64>,
    pub noise: NoiseSpec,
    pub prior: PriorSpec,
    pub b2: f64,
    pub mu: Vec<f64>,
    pub c_k: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn implicit_problem(seed: u64) -> ImplicitProblem {
    let mut rng = StreamRng::new(seed, 300, 0);
    let m = 1 + (rng.next_u64() % 64) as usize;
    let n = 1 + (rng.next_u64() % 96) as usize;
    let a = random_dense(&mut rng, n, m);
    let r = random_vec(&mut rng, n, 0.2, 2.0);
    let mu = random_vec(&mut rng, m, 0.2, 2.0);
    let b2 = 0.5 + 3.0 * rng.uniform();
    let c_k: Vec<f64> = (0..m).map(|_| 1.0 + b2.sqrt() * rng.standard_normal()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let shared = Arc::new(a.clone());
    let adj = Arc::clone(&shared);
    let op = ForwardOperator::matrix_free(
        m,
        n,
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, row) in out.iter_mut().zip(shared.iter()) {
                *o = row.iter().zip(x).map(|(p, q)| p * q).sum();
            }
        }),
        Arc::new(move |w: &[f64], out: &mut [f64]| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = adj.iter().zip(w).map(|(row, wi)| row[j] * wi).sum();
            }
        }),
        true,
    )
    .unwrap();
    ImplicitProblem {
        op,
        a,
        noise: NoiseSpec::new(r.clone()).unwrap(),
        r,
        prior: PriorSpec::unit_mean(m, b2).unwrap(),
        b2,
        mu,
        c_k,
        y,
    }
}
