//! Element-wise (Hadamard) products and the column-scaled operator `A_mu`.
//!
//! `A_mu` is the operator whose `i`th row is `[A_ij * mu_j]_j`, so that
//! `A (c ∘ mu) = A_mu c` and `A_mu^T w = (A^T w) ∘ mu`. In the matrix-free
//! setting it is never formed: [`ScaledOperatorView`] composes the base
//! operator's apply/adjoint with the scaling lazily.

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{LinearMap, Matrix};

/// `a ∘ b`.
pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    ensure_len("hadamard", b, a.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// `A (c ∘ mu)`, equal to `A_mu c`.
pub fn scaled_apply<A: LinearMap + ?Sized>(a: &A, mu: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    ensure_len("scaled_apply mu", mu, a.input_dim())?;
    ensure_len("scaled_apply c", c, a.input_dim())?;
    let scaled = hadamard(c, mu)?;
    let mut out = vec![0.0; a.output_dim()];
    a.apply_into(&scaled, &mut out);
    Ok(out)
}

/// `(A^T w) ∘ mu`, equal to `A_mu^T w`.
pub fn scaled_adjoint_apply<A: LinearMap + ?Sized>(
    a: &A,
    mu: &[f64],
    w: &[f64],
) -> Result<Vec<f64>> {
    ensure_len("scaled_adjoint_apply mu", mu, a.input_dim())?;
    ensure_len("scaled_adjoint_apply w", w, a.output_dim())?;
    let mut out = vec![0.0; a.input_dim()];
    a.adjoint_into(w, &mut out);
    out.iter_mut().zip(mu).for_each(|(o, m)| *o *= m);
    Ok(out)
}

/// `(A^T M A) ∘ mu mu^T` for diagonal positive-definite `M = diag(weights)`.
///
/// Equals `A_mu^T M A_mu`. The Gram matrix is formed first and the scaling
/// applied afterwards, so the two routes differ only by re-association.
pub fn scaled_gram(a: &Matrix, weights: &[f64], mu: &[f64]) -> Result<Matrix> {
    ensure_len("scaled_gram weights", weights, a.rows())?;
    ensure_len("scaled_gram mu", mu, a.cols())?;
    if let Some((i, w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w > 0.0 && w.is_finite()))
    {
        return Err(Error::NotPositiveDefinite(format!(
            "diagonal weight {i} is {w}, must be strictly positive"
        )));
    }
    let m = a.cols();
    let mut gram = Matrix::zeros(m, m);
    for (l, &w) in weights.iter().enumerate() {
        let row = a.row(l);
        for i in 0..m {
            let wi = w * row[i];
            if wi == 0.0 {
                continue;
            }
            for j in i..m {
                gram[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let v = gram[(i, j)] * mu[i] * mu[j];
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(gram)
}

/// Lazy `A_mu` over any base operator.
#[derive(Debug, Clone, Copy)]
pub struct ScaledOperatorView<'a, A: ?Sized> {
    base: &'a A,
    scale: &'a [f64],
}

impl<'a, A: LinearMap + ?Sized> ScaledOperatorView<'a, A> {
    pub fn new(base: &'a A, scale: &'a [f64]) -> Result<Self> {
        ensure_len("ScaledOperatorView scale", scale, base.input_dim())?;
        Ok(Self { base, scale })
    }

    pub fn scale(&self) -> &[f64] {
        self.scale
    }

    pub fn base(&self) -> &A {
        self.base
    }
}

impl<A: LinearMap + ?Sized> LinearMap for ScaledOperatorView<'_, A> {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let scaled: Vec<f64> = x.iter().zip(self.scale).map(|(a, b)| a * b).collect();
        self.base.apply_into(&scaled, out);
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        self.base.adjoint_into(w, out);
        out.iter_mut().zip(self.scale).for_each(|(o, s)| *o *= s);
    }
}
