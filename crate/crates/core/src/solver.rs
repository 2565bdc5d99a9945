//! 4D-Var cost and an unconstrained L-BFGS minimizer that only needs operator
//! apply/adjoint calls.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::forward::{ForwardOperator, NoiseSpec, PriorSpec};
use crate::hadamard::scaled_adjoint_apply;
use crate::linalg::{dot, norm2, norm_inf, LinearMap};

#[derive(Debug, Clone, PartialEq)]
pub struct CostEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Anything L-BFGS can minimize.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> CostEvaluation;
}

/// Adapts a closure returning `(value, gradient)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64]) -> CostEvaluation {
        let (value, gradient) = (self.f)(x);
        CostEvaluation { value, gradient }
    }
}

/// Negative log-posterior of the scaling factors, constant dropped:
///
/// ```text
/// F(c) = ½ |c - c_k|² / b² + ½ (y_k - A(c∘mu))^T R^{-1} (y_k - A(c∘mu))
/// ∇F   = (c - c_k) / b² - (A^T R^{-1} (y_k - A(c∘mu))) ∘ mu
/// ```
#[derive(Debug, Clone, Copy)]
pub struct FourDVarCost<'a, A: ?Sized> {
    op: &'a A,
    noise: &'a NoiseSpec,
    prior_variance: f64,
    prior_mean: &'a [f64],
    observation: &'a [f64],
    mu: &'a [f64],
}

impl<'a, A: LinearMap + ?Sized> FourDVarCost<'a, A> {
    pub fn new(
        op: &'a A,
        noise: &'a NoiseSpec,
        prior_variance: f64,
        prior_mean: &'a [f64],
        observation: &'a [f64],
        mu: &'a [f64],
    ) -> Result<Self> {
        ensure_len("4D-Var prior mean", prior_mean, op.input_dim())?;
        ensure_len("4D-Var control mu", mu, op.input_dim())?;
        ensure_len("4D-Var observation", observation, op.output_dim())?;
        if noise.dim() != op.output_dim() {
            return Err(Error::dim("4D-Var noise", op.output_dim(), noise.dim()));
        }
        if !(prior_variance > 0.0) {
            return Err(Error::InvalidArgument("prior variance must be positive".into()));
        }
        Ok(Self {
            op,
            noise,
            prior_variance,
            prior_mean,
            observation,
            mu,
        })
    }
}

impl<A: LinearMap + ?Sized> Objective for FourDVarCost<'_, A> {
    fn dim(&self) -> usize {
        self.op.input_dim()
    }

    fn evaluate(&self, c: &[f64]) -> CostEvaluation {
        let scaled: Vec<f64> = c.iter().zip(self.mu).map(|(a, b)| a * b).collect();
        let mut predicted = vec![0.0; self.op.output_dim()];
        self.op.apply_into(&scaled, &mut predicted);
        let residual: Vec<f64> = self
            .observation
            .iter()
            .zip(&predicted)
            .map(|(y, p)| y - p)
            .collect();
        let weighted = self.noise.whiten(&residual);
        let departure: Vec<f64> = c.iter().zip(self.prior_mean).map(|(a, b)| a - b).collect();
        let inv_b2 = 1.0 / self.prior_variance;
        let value = 0.5 * dot(&departure, &departure) * inv_b2 + 0.5 * dot(&residual, &weighted);
        let back = scaled_adjoint_apply(self.op, self.mu, &weighted)
            .expect("dimensions checked at construction");
        let gradient = departure
            .iter()
            .zip(&back)
            .map(|(d, b)| d * inv_b2 - b)
            .collect();
        CostEvaluation { value, gradient }
    }
}

/// One-shot evaluation of the 4D-Var cost and gradient at `c`.
pub fn cost_and_gradient(
    c: &[f64],
    prior: &PriorSpec,
    prior_mean_k: &[f64],
    y_k: &[f64],
    noise: &NoiseSpec,
    op: &ForwardOperator,
    mu: &[f64],
) -> Result<CostEvaluation> {
    let cost = FourDVarCost::new(op, noise, prior.variance(), prior_mean_k, y_k, mu)?;
    ensure_len("4D-Var c", c, op.m())?;
    Ok(cost.evaluate(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Convergence when `|g|_inf <= grad_tol * max(1, |g_0|_inf)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-9,
            max_iter: 500,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure(String),
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub final_gradient_norm: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Cost at the start and after every accepted iterate.
    pub cost_trace: Vec<f64>,
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimizes `objective` from `start` with L-BFGS and a strong-Wolfe line
/// search.
///
/// When `phi(a)` is within `1e-12 |phi(0)|` of `phi(0)`, sufficient decrease
/// uses the approximate Wolfe form `phi'(a) <= (2 c1 - 1) phi'(0)` instead of
/// the Armijo test: close to the optimum the cost difference is below its
/// rounding error, while the derivative form is exact for quadratics.
pub fn minimize<O: Objective + ?Sized>(
    start: &[f64],
    objective: &O,
    config: &LbfgsConfig,
) -> SolverReport {
    assert_eq!(start.len(), objective.dim(), "start has wrong dimension");
    let first = objective.evaluate(start);
    let mut evaluations = 1;
    let mut cur = Point {
        x: start.to_vec(),
        f: first.value,
        g: first.gradient,
    };
    let mut cost_trace = vec![cur.f];
    let threshold = config.grad_tol * norm_inf(&cur.g).max(1.0);
    let finish = |cur: Point, iterations, evaluations, termination: Termination, trace| SolverReport {
        final_gradient_norm: norm_inf(&cur.g),
        converged: termination == Termination::GradientTolerance,
        solution: cur.x,
        iterations,
        evaluations,
        termination,
        cost_trace: trace,
    };
    if !cur.f.is_finite() || cur.g.iter().any(|v| !v.is_finite()) {
        return finish(cur, 0, evaluations, Termination::NonFinite, cost_trace);
    }
    if norm_inf(&cur.g) <= threshold {
        return finish(cur, 0, evaluations, Termination::GradientTolerance, cost_trace);
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    for iter in 1..=config.max_iter {
        let mut direction = two_loop(&cur.g, &history);
        let mut slope = dot(&direction, &cur.g);
        if !(slope < 0.0) {
            history.clear();
            direction = cur.g.iter().map(|v| -v).collect();
            slope = dot(&direction, &cur.g);
        }
        let initial_step = if history.is_empty() {
            (1.0 / norm2(&cur.g)).min(1.0)
        } else {
            1.0
        };
        let search = line_search(objective, &cur, &direction, slope, initial_step, config);
        evaluations += search.evaluations;
        let next = match search.point {
            Some(p) => p,
            None if !history.is_empty() => {
                // retry from steepest descent before giving up
                history.clear();
                continue;
            }
            None => {
                return finish(
                    cur,
                    iter - 1,
                    evaluations,
                    Termination::LineSearchFailure(search.reason),
                    cost_trace,
                );
            }
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * norm2(&s) * norm2(&y) {
            if history.len() == config.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        cur = next;
        cost_trace.push(cur.f);
        if norm_inf(&cur.g) <= threshold {
            return finish(cur, iter, evaluations, Termination::GradientTolerance, cost_trace);
        }
    }
    finish(
        cur,
        config.max_iter,
        evaluations,
        Termination::MaxIterations,
        cost_trace,
    )
}

/// `-H g` from the stored correction pairs.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct SearchOutcome {
    point: Option<Point>,
    evaluations: usize,
    reason: String,
}

#[derive(Debug, Clone, Copy)]
struct Trial {
    step: f64,
    f: f64,
    slope: f64,
}

fn line_search<O: Objective + ?Sized>(
    objective: &O,
    cur: &Point,
    direction: &[f64],
    slope0: f64,
    initial_step: f64,
    config: &LbfgsConfig,
) -> SearchOutcome {
    let f0 = cur.f;
    let slack = 1e-12 * f0.abs();
    let mut evaluations = 0;
    let mut eval = |step: f64| {
        evaluations += 1;
        let x: Vec<f64> = cur
            .x
            .iter()
            .zip(direction)
            .map(|(xi, di)| xi + step * di)
            .collect();
        let e = objective.evaluate(&x);
        let slope = dot(&e.gradient, direction);
        (
            Point {
                x,
                f: e.value,
                g: e.gradient,
            },
            slope,
        )
    };
    let sufficient = |t: &Trial| {
        if (t.f - f0).abs() <= slack {
            // the Armijo test is below rounding here and would accept overshoots
            t.slope <= (2.0 * config.c1 - 1.0) * slope0
        } else {
            t.f <= f0 + config.c1 * t.step * slope0
        }
    };
    let curvature = |t: &Trial| t.slope.abs() <= config.c2 * slope0.abs();

    let mut prev = Trial {
        step: 0.0,
        f: f0,
        slope: slope0,
    };
    let mut step = initial_step;
    let mut bracket: Option<(Trial, Trial)> = None;
    for i in 0..config.max_line_search {
        let (p, slope) = eval(step);
        if !p.f.is_finite() || !slope.is_finite() {
            step = 0.5 * (prev.step + step);
            continue;
        }
        let t = Trial { step, f: p.f, slope };
        if !sufficient(&t) || (i > 0 && t.f > prev.f + slack) {
            bracket = Some((prev, t));
            break;
        }
        if curvature(&t) {
            return SearchOutcome {
                point: Some(p),
                evaluations,
                reason: String::new(),
            };
        }
        if t.slope >= 0.0 {
            bracket = Some((t, prev));
            break;
        }
        prev = t;
        step *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return SearchOutcome {
            point: None,
            evaluations,
            reason: "no bracketing step found".into(),
        };
    };

    for _ in 0..config.max_line_search {
        let width = (hi.step - lo.step).abs();
        if width <= 1e-16 * lo.step.abs().max(hi.step.abs()) {
            break;
        }
        let (left, right) = if lo.step < hi.step {
            (lo.step, hi.step)
        } else {
            (hi.step, lo.step)
        };
        let mut step = cubic_minimizer(&lo, &hi);
        if !(step > left + 0.1 * width && step < right - 0.1 * width) {
            step = 0.5 * (lo.step + hi.step);
        }
        let (p, slope) = eval(step);
        let t = Trial { step, f: p.f, slope };
        if !t.f.is_finite() || !sufficient(&t) || t.f > lo.f + slack {
            hi = t;
        } else {
            if curvature(&t) {
                return SearchOutcome {
                    point: Some(p),
                    evaluations,
                    reason: String::new(),
                };
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    SearchOutcome {
        point: None,
        evaluations,
        reason: format!(
            "zoom did not find a strong-Wolfe step in [{}, {}]",
            lo.step, hi.step
        ),
    }
}

/// Minimizer of the cubic interpolating values and slopes at two steps.
fn cubic_minimizer(a: &Trial, b: &Trial) -> f64 {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.step - b.step);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = disc.sqrt() * (b.step - a.step).signum();
    b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2)
}
