//! Two-pass sample statistics in fixed index order.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance, `1/(M-1) Σ (x_k - x̄)^2`.
pub fn sample_variance(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: xs.len(),
        });
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Ok(ss / (xs.len() - 1) as f64)
}

/// Column means of a row-per-sample matrix.
pub fn column_means(samples: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; samples.cols()];
    for k in 0..samples.rows() {
        means
            .iter_mut()
            .zip(samples.row(k))
            .for_each(|(m, v)| *m += v);
    }
    let n = samples.rows() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

/// Unbiased sample covariance of the rows of `samples`.
pub fn sample_covariance(samples: &Matrix) -> Result<Matrix> {
    let (rows, cols) = samples.shape();
    if rows < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: rows,
        });
    }
    let means = column_means(samples);
    let mut cov = Matrix::zeros(cols, cols);
    let mut dev = vec![0.0; cols];
    for k in 0..rows {
        dev.iter_mut()
            .zip(samples.row(k))
            .zip(&means)
            .for_each(|((d, v), m)| *d = v - m);
        for i in 0..cols {
            let di = dev[i];
            for j in i..cols {
                cov[(i, j)] += di * dev[j];
            }
        }
    }
    let denom = (rows - 1) as f64;
    for i in 0..cols {
        for j in i..cols {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Sample skewness `g1 = m3 / m2^{3/2}` with biased moments.
pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
