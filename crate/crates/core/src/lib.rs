//! Monte Carlo posterior uncertainty for linear-Gaussian flux inversions.
//!
//! The parameter is a vector of scaling factors `c` applied element-wise to a
//! control flux `mu`; observations are `y = A (c ∘ mu) + z + eps`. The crate
//! provides the exact posterior for small problems, an L-BFGS 4D-Var solver
//! for matrix-free operators, a reproducible Monte Carlo ensemble of MAP
//! estimators, and chi-squared brackets on functional credible intervals.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod config;
pub mod ensemble;
pub mod experiments;
pub mod forward;
pub mod hadamard;
pub mod linalg;
pub mod posterior;
pub mod rng;
pub mod solver;
pub mod special;
pub mod stats;
pub mod store;
pub mod uq;

pub use error::{Error, Result, StoreError};
