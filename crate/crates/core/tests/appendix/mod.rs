//! Element-wise product identities the posterior algebra relies on, as
//! randomized properties. Reference sides are computed with plain index loops.
#![allow(dead_code)]

use fluxmc::hadamard::{hadamard, scaled_adjoint_apply, scaled_apply, scaled_gram};
use fluxmc::linalg::{LinearMap, Matrix};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub const TOL: f64 = 1e-12;
pub const CASES: u32 = 256;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// `A_mu` with `[A_mu]_ij = A_ij mu_j`, by loops.
fn a_mu_loop(a: &Matrix, mu: &[f64]) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| a[(i, j)] * mu[j]).collect())
        .collect()
}

fn matmul_loop(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = y.len();
    let cols = y.first().map_or(0, Vec::len);
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|l| row[l] * y[l][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose_loop(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = x.first().map_or(0, Vec::len);
    (0..cols).map(|j| x.iter().map(|r| r[j]).collect()).collect()
}

fn flat(x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

prop_compose! {
    fn operator_and_mu()(m in 1usize..9, n in 1usize..9)
        (a in vec_strategy(n * m), mu in vec_strategy(m), m in Just(m), n in Just(n))
        -> (Matrix, Vec<f64>) {
        (Matrix::new(n, m, a).unwrap(), mu)
    }
}

prop_compose! {
    /// An equally weighted sample of `k` points in `R^m`, viewed as a discrete
    /// distribution, together with a fixed vector `a`.
    fn discrete_distribution()(m in 1usize..7, k in 2usize..12)
        (pts in vec_strategy(k * m), a in vec_strategy(m), m in Just(m), k in Just(k))
        -> (Matrix, Vec<f64>) {
        (Matrix::new(k, m, pts).unwrap(), a)
    }
}

fn expectation(points: &Matrix) -> Vec<f64> {
    let k = points.rows() as f64;
    (0..points.cols())
        .map(|j| (0..points.rows()).map(|i| points[(i, j)]).sum::<f64>() / k)
        .collect()
}

/// Population covariance of the discrete distribution.
fn covariance(points: &Matrix) -> Vec<Vec<f64>> {
    let e = expectation(points);
    let k = points.rows() as f64;
    let m = points.cols();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    (0..points.rows())
                        .map(|r| (points[(r, i)] - e[i]) * (points[(r, j)] - e[j]))
                        .sum::<f64>()
                        / k
                })
                .collect()
        })
        .collect()
}

fn spd_from(b: &[f64], n: usize) -> Matrix {
    let bm = Matrix::new(n, n, b.to_vec()).unwrap();
    let mut m = bm.matmul(&bm.transpose()).unwrap();
    for i in 0..n {
        m[(i, i)] += 0.5;
    }
    m
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(config)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

/// E[x ∘ a] = E[x] ∘ a.
pub fn expectation_commutes_with_hadamard(cases: u32) -> Result<(), String> {
    check(cases, discrete_distribution(), |(pts, a)| {
        let scaled = pts.scale_columns(&a).unwrap();
        let lhs = expectation(&scaled);
        let rhs = hadamard(&expectation(&pts), &a).unwrap();
        prop_assert!(rel_err(&lhs, &rhs) <= TOL, "{lhs:?} vs {rhs:?}");
        Ok(())
    })
}

/// Cov[x ∘ a] = Cov[x] ∘ a a^T.
pub fn covariance_of_hadamard(cases: u32) -> Result<(), String> {
    check(cases, discrete_distribution(), |(pts, a)| {
        let scaled = pts.scale_columns(&a).unwrap();
        let lhs = flat(&covariance(&scaled));
        let cov = Matrix::from_rows(&covariance(&pts)).unwrap();
        let rhs = cov.hadamard(&Matrix::outer(&a, &a)).unwrap();
        prop_assert!(rel_err(&lhs, rhs.as_slice()) <= TOL);
        Ok(())
    })
}

/// A_mu^T A_mu = A^T A ∘ mu mu^T.
pub fn gram_decomposition(cases: u32) -> Result<(), String> {
    check(cases, operator_and_mu(), |(a, mu)| {
        let amu = a_mu_loop(&a, &mu);
        let lhs = flat(&matmul_loop(&transpose_loop(&amu), &amu));
        let ones = vec![1.0; a.rows()];
        let rhs = scaled_gram(&a, &ones, &mu).unwrap();
        prop_assert!(rel_err(rhs.as_slice(), &lhs) <= TOL);
        let ata = a.transpose().matmul(&a).unwrap();
        let rhs2 = ata.hadamard(&Matrix::outer(&mu, &mu)).unwrap();
        prop_assert!(rel_err(rhs2.as_slice(), &lhs) <= TOL);
        Ok(())
    })
}

/// A_mu^T M A_mu = A^T M A ∘ mu mu^T for positive-definite M.
pub fn weighted_gram_decomposition(cases: u32) -> Result<(), String> {
    let strategy = operator_and_mu().prop_flat_map(|(a, mu)| {
        let n = a.rows();
        (Just(a), Just(mu), vec_strategy(n * n))
    });
    check(cases, strategy, |(a, mu, b)| {
        let n = a.rows();
        let m_mat = spd_from(&b, n);
        let amu = a_mu_loop(&a, &mu);
        let lhs = flat(&matmul_loop(&matmul_loop(&transpose_loop(&amu), &m_mat.to_rows()), &amu));
        let rhs = a
            .transpose()
            .matmul(&m_mat)
            .unwrap()
            .matmul(&a)
            .unwrap()
            .hadamard(&Matrix::outer(&mu, &mu))
            .unwrap();
        prop_assert!(rel_err(rhs.as_slice(), &lhs) <= TOL);
        Ok(())
    })
}

/// Diagonal positive weights: the library's scaled Gram matches loops.
pub fn diagonal_weighted_gram(cases: u32) -> Result<(), String> {
    let strategy = operator_and_mu().prop_flat_map(|(a, mu)| {
        let n = a.rows();
        (Just(a), Just(mu), prop::collection::vec(0.01f64..10.0, n))
    });
    check(cases, strategy, |(a, mu, w)| {
        let amu = a_mu_loop(&a, &mu);
        let weighted: Vec<Vec<f64>> = amu
            .iter()
            .zip(&w)
            .map(|(row, wi)| row.iter().map(|v| v * wi).collect())
            .collect();
        let lhs = flat(&matmul_loop(&transpose_loop(&amu), &weighted));
        let rhs = scaled_gram(&a, &w, &mu).unwrap();
        prop_assert!(rel_err(rhs.as_slice(), &lhs) <= TOL);
        Ok(())
    })
}

/// A_mu^T M y = (A^T M y) ∘ mu.
pub fn adjoint_through_hadamard(cases: u32) -> Result<(), String> {
    let strategy = operator_and_mu().prop_flat_map(|(a, mu)| {
        let n = a.rows();
        (Just(a), Just(mu), prop::collection::vec(0.01f64..10.0, n), vec_strategy(n))
    });
    check(cases, strategy, |(a, mu, w, y)| {
        let amu = a_mu_loop(&a, &mu);
        let my: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a * b).collect();
        let lhs: Vec<f64> = (0..a.cols())
            .map(|j| (0..a.rows()).map(|i| amu[i][j] * my[i]).sum())
            .collect();
        let rhs = scaled_adjoint_apply(&a, &mu, &my).unwrap();
        prop_assert!(rel_err(&rhs, &lhs) <= TOL);
        Ok(())
    })
}

/// A (c ∘ mu) = A_mu c.
pub fn forward_through_hadamard(cases: u32) -> Result<(), String> {
    let strategy = operator_and_mu().prop_flat_map(|(a, mu)| {
        let m = a.cols();
        (Just(a), Just(mu), vec_strategy(m))
    });
    check(cases, strategy, |(a, mu, c)| {
        let amu = a_mu_loop(&a, &mu);
        let lhs: Vec<f64> = amu.iter().map(|row| row.iter().zip(&c).map(|(x, y)| x * y).sum()).collect();
        let rhs = scaled_apply(&a, &mu, &c).unwrap();
        prop_assert!(rel_err(&rhs, &lhs) <= TOL);
        let materialized = a.scale_columns(&mu).unwrap().apply(&c).unwrap();
        prop_assert!(rel_err(&materialized, &lhs) <= TOL);
        Ok(())
    })
}

/// A ((alpha a + beta b) ∘ mu) = alpha A (a ∘ mu) + beta A (b ∘ mu).
pub fn scaled_forward_is_linear(cases: u32) -> Result<(), String> {
    let strategy = operator_and_mu().prop_flat_map(|(a, mu)| {
        let m = a.cols();
        (Just(a), Just(mu), vec_strategy(m), vec_strategy(m), -5.0f64..5.0, -5.0f64..5.0)
    });
    check(cases, strategy, |(a, mu, x, y, alpha, beta)| {
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| alpha * p + beta * q).collect();
        let lhs = scaled_apply(&a, &mu, &combo).unwrap();
        let ax = scaled_apply(&a, &mu, &x).unwrap();
        let ay = scaled_apply(&a, &mu, &y).unwrap();
        let rhs: Vec<f64> = ax.iter().zip(&ay).map(|(p, q)| alpha * p + beta * q).collect();
        // cancellation between the two terms: compare against their magnitude
        let scale: f64 = ax
            .iter()
            .zip(&ay)
            .map(|(p, q)| (alpha * p).abs() + (beta * q).abs())
            .fold(0.0, f64::max);
        let diff = lhs.iter().zip(&rhs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= TOL * scale, "{diff} vs {scale}");
        Ok(())
    })
}

pub type Property = fn(u32) -> Result<(), String>;

pub const PROPERTIES: &[(&str, Property)] = &[
    ("expectation_commutes_with_hadamard", expectation_commutes_with_hadamard),
    ("covariance_of_hadamard", covariance_of_hadamard),
    ("gram_decomposition", gram_decomposition),
    ("weighted_gram_decomposition", weighted_gram_decomposition),
    ("diagonal_weighted_gram", diagonal_weighted_gram),
    ("adjoint_through_hadamard", adjoint_through_hadamard),
    ("forward_through_hadamard", forward_through_hadamard),
    ("scaled_forward_is_linear", scaled_forward_is_linear),
];
