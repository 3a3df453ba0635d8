//! Min-max fractional beamforming via matrix lifting, a DC rank penalty and
//! successive convex approximation.
//!
//! The problem family is
//!
//! ```text
//! minimize_x  max_k  w_k / |c_k^H x|^2    subject to ||x|| = 1
//! ```
//!
//! Lifting `U = x x^H` gives a convex objective over the unit-trace PSD set
//! plus the constraint `rank(U) = 1`, which is replaced by the penalty
//! `Omega (Tr(U) - ||U||_2)`. Each SCA step linearizes `-||U||_2` at the
//! principal eigenvector `omega_n` of the current iterate and solves
//!
//! ```text
//! minimize_U  max_k w_k / Tr(c_k c_k^H U) + Omega Tr((I - omega_n omega_n^H) U)
//! subject to  Tr(U) = 1, U >= 0
//! ```
//!
//! The inner convex program is solved on a log-sum-exp smoothing of the max
//! with increasing sharpness, by spectral projected gradient over the
//! spectraplex. The solution vector is read off as the principal
//! eigenvector of the final (numerically rank-one) iterate, which coincides
//! with its Cholesky factor.

use std::collections::VecDeque;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    canonicalize_phase, hermitian_eigen, inner, outer, principal_eigen, project_spectraplex, quadratic_form, CMatrix,
    CVector,
};

/// One instance of the shared subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedProblem {
    vectors: Vec<CVector>,
    weights: Vec<f64>,
}

impl LiftedProblem {
    pub fn new(vectors: Vec<CVector>, weights: Vec<f64>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::domain("lifted problem needs at least one constraint"));
        }
        Error::check_len("lifted problem weights", vectors.len(), weights.len())?;
        let n = vectors[0].len();
        if n == 0 {
            return Err(Error::domain("lifted problem dimension must be positive"));
        }
        for (k, c) in vectors.iter().enumerate() {
            Error::check_len("lifted problem vector", n, c.len())?;
            if !(c.norm() > 0.0) || !c.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::domain(format!("constraint vector {k} must be finite and nonzero")));
            }
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::domain("constraint weights must be positive and finite"));
        }
        Ok(Self { vectors, weights })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[CVector] {
        &self.vectors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `max_k w_k / |c_k^H x|^2` for a unit-norm `x`.
    pub fn value(&self, x: &CVector) -> f64 {
        self.vectors
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w / c.dotc(x).norm_sqr())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest feasible `Lambda` for a lifted iterate: `max_k w_k / Tr(c_k c_k^H U)`.
    pub fn lambda(&self, u: &CMatrix) -> f64 {
        self.vectors
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let q = quadratic_form(u, c);
                if q > 0.0 {
                    w / q
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rescaled copy with unit-norm vectors and weights divided by `scale`.
    fn normalized(&self) -> (Self, f64) {
        let mut vectors = Vec::with_capacity(self.len());
        let mut weights = Vec::with_capacity(self.len());
        for (c, w) in self.vectors.iter().zip(&self.weights) {
            let norm = c.norm();
            vectors.push(c / Complex64::new(norm, 0.0));
            weights.push(w / (norm * norm));
        }
        let scale = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= scale;
        }
        (Self { vectors, weights }, scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Initial penalty weight as a fraction of the starting objective.
    pub omega_init_fraction: f64,
    pub omega_growth: f64,
    /// Relative residual improvement below which the penalty grows. The
    /// penalty also grows when the observed contraction of the residual
    /// cannot reach `residual_tol` within half of the remaining outer budget.
    pub stall_fraction: f64,
    pub max_outer: usize,
    /// Rank-one residual `Tr(U) - ||U||_2` required at exit.
    pub residual_tol: f64,
    /// Relative change of the objective between SCA steps that ends the loop.
    pub sca_tol: f64,
    /// Projected-gradient stationarity tolerance of the inner solver.
    pub inner_tol: f64,
    /// Iteration budget of one inner solve, shared by the smoothing levels.
    pub max_inner: usize,
    /// Smoothing sharpness schedule, relative to the current objective.
    pub sharpness: Vec<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            omega_init_fraction: 0.01,
            omega_growth: 5.0,
            stall_fraction: 0.01,
            max_outer: 20,
            residual_tol: 1e-6,
            sca_tol: 1e-7,
            inner_tol: 1e-8,
            max_inner: 5000,
            sharpness: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6],
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.omega_init_fraction > 0.0) {
            problems.push("solver.omega_init_fraction must be positive".to_string());
        }
        if !(self.omega_growth > 1.0) {
            problems.push("solver.omega_growth must exceed 1".to_string());
        }
        if !(0.0..1.0).contains(&self.stall_fraction) {
            problems.push("solver.stall_fraction must lie in [0, 1)".to_string());
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            problems.push("solver iteration caps must be positive".to_string());
        }
        if !(self.residual_tol > 0.0 && self.sca_tol > 0.0 && self.inner_tol > 0.0) {
            problems.push("solver tolerances must be positive".to_string());
        }
        if self.sharpness.is_empty() || !self.sharpness.iter().all(|t| *t > 0.0) {
            problems.push("solver.sharpness must be a non-empty list of positive values".to_string());
        }
        problems
    }
}

/// Record of one SCA step. Objective values and penalty weights are in the
/// caller's units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverIteration {
    pub iteration: usize,
    pub lambda: f64,
    pub residual: f64,
    pub omega: f64,
    /// DC objective `Lambda + Omega (Tr U - ||U||)` at the step's start.
    pub penalized_before: f64,
    /// Same objective, same `Omega`, at the step's result.
    pub penalized_after: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub steps: Vec<SolverIteration>,
    pub converged: bool,
    pub final_omega: f64,
    pub warnings: Vec<String>,
}

impl SolverTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.residual)
    }

    pub fn final_lambda(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.lambda)
    }

    /// Writes `iteration,lambda,residual,omega` rows (with header).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "lambda", "residual", "omega"])?;
        for s in &self.steps {
            w.write_record([
                s.iteration.to_string(),
                format!("{:e}", s.lambda),
                format!("{:e}", s.residual),
                format!("{:e}", s.omega),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Unit-norm solution with canonical phase.
    pub x: CVector,
    /// `max_k w_k / |c_k^H x|^2`.
    pub value: f64,
    /// Lifted objective `Lambda` of the final matrix iterate.
    pub lambda: f64,
    pub u: CMatrix,
    pub trace: SolverTrace,
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u: CMatrix,
    pub lambda: f64,
    pub iterations: usize,
    /// Projected-gradient norm of the smoothed objective at the last level.
    pub stationarity: f64,
}

/// Solves the linearized penalized program from the feasible start `I/N`.
pub fn inner_convex_solve(
    problem: &LiftedProblem,
    omega_n: &CVector,
    penalty: f64,
    opts: &SolverOptions,
) -> Result<InnerSolution> {
    let n = problem.dim();
    let start = CMatrix::identity(n, n) / Complex64::new(n as f64, 0.0);
    inner_convex_solve_from(problem, omega_n, penalty, &start, opts)
}

/// Same as [`inner_convex_solve`] with an explicit feasible warm start.
pub fn inner_convex_solve_from(
    problem: &LiftedProblem,
    omega_n: &CVector,
    penalty: f64,
    start: &CMatrix,
    opts: &SolverOptions,
) -> Result<InnerSolution> {
    Error::check_len("linearization point", problem.dim(), omega_n.len())?;
    if (omega_n.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("linearization point must have unit norm"));
    }
    if !(penalty >= 0.0) {
        return Err(Error::domain("penalty weight must be non-negative"));
    }
    let (normalized, scale) = problem.normalized();
    let mut sol = Smoothed::new(&normalized, omega_n, penalty / scale).minimize(start, opts)?;
    sol.lambda *= scale;
    Ok(sol)
}

/// Runs the full penalty/SCA loop.
pub fn solve(problem: &LiftedProblem, opts: &SolverOptions) -> Result<Solution> {
    let n = problem.dim();
    let (normalized, scale) = problem.normalized();
    let mut trace = SolverTrace::default();

    if n == 1 {
        let x = CVector::from_element(1, Complex64::new(1.0, 0.0));
        let value = problem.value(&x);
        trace.steps.push(SolverIteration {
            iteration: 0,
            lambda: value,
            residual: 0.0,
            omega: 0.0,
            penalized_before: value,
            penalized_after: value,
            inner_iterations: 0,
        });
        trace.converged = true;
        return Ok(Solution {
            u: outer(&x),
            x,
            value,
            lambda: value,
            trace,
        });
    }

    let mut gram = CMatrix::zeros(n, n);
    for (c, w) in normalized.vectors.iter().zip(&normalized.weights) {
        gram += outer(c) / Complex64::new(*w, 0.0);
    }
    let (gram_values, _) = hermitian_eigen(&gram);
    let smallest = gram_values[n - 1].max(0.0);
    if smallest <= 1e-12 * gram_values[0] {
        trace.warnings.push(format!(
            "constraint Gram matrix is near-singular (eigenvalues {:.3e} .. {:.3e})",
            gram_values[0], smallest
        ));
    }
    let (_, mut omega_n) = principal_eigen(&gram);

    let mut u = CMatrix::identity(n, n) / Complex64::new(n as f64, 0.0);
    let mut lambda = normalized.lambda(&u);
    let mut residual = rank_residual(&u);
    let mut omega = opts.omega_init_fraction * lambda;

    for iteration in 0..opts.max_outer {
        let before = lambda + omega * (1.0 - quadratic_form(&u, &omega_n));
        let step = Smoothed::new(&normalized, &omega_n, omega).minimize(&u, opts)?;
        let next_residual = rank_residual(&step.u);
        let after = step.lambda + omega * (1.0 - quadratic_form(&step.u, &omega_n));
        trace.steps.push(SolverIteration {
            iteration,
            lambda: step.lambda * scale,
            residual: next_residual,
            omega: omega * scale,
            penalized_before: before * scale,
            penalized_after: after * scale,
            inner_iterations: step.iterations,
        });

        let change = (lambda - step.lambda).abs() / lambda;
        let ratio = next_residual / residual;
        // steps the current contraction rate needs to reach the tolerance
        let needed = if ratio < 1.0 && next_residual > opts.residual_tol {
            (opts.residual_tol / next_residual).ln() / ratio.ln()
        } else {
            0.0
        };
        let remaining = (opts.max_outer - iteration - 1) as f64;
        let stalled = ratio > 1.0 - opts.stall_fraction || needed > 0.5 * remaining;
        u = step.u;
        lambda = step.lambda;
        residual = next_residual;
        omega_n = principal_eigen(&u).1;

        if residual <= opts.residual_tol {
            if change <= opts.sca_tol {
                trace.converged = true;
                break;
            }
        } else if stalled {
            omega *= opts.omega_growth;
        }
    }
    trace.final_omega = omega * scale;
    if residual > opts.residual_tol {
        return Err(Error::NotConverged(Box::new(trace)));
    }
    trace.converged = true;

    let (_, mut x) = principal_eigen(&u);
    canonicalize_phase(&mut x);
    let value = problem.value(&x);
    Ok(Solution {
        x,
        value,
        lambda: lambda * scale,
        u,
        trace,
    })
}

/// `Tr(U) - ||U||_2`.
pub fn rank_residual(u: &CMatrix) -> f64 {
    let trace: f64 = (0..u.nrows()).map(|i| u[(i, i)].re).sum();
    let (values, _) = hermitian_eigen(u);
    trace - values[0]
}

/// Log-sum-exp smoothing of the linearized objective on a normalized problem.
struct Smoothed<'a> {
    problem: &'a LiftedProblem,
    omega_n: CVector,
    linearization: CMatrix,
    penalty: f64,
}

/// An iterate with its cached ratios `w_k / c_k^H U c_k` and `omega_n^H U omega_n`.
struct Point {
    u: CMatrix,
    quads: Vec<f64>,
    terms: Vec<f64>,
    aligned: f64,
}

const LINE_SEARCH_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;
const STATIONARITY_CHECK_EVERY: usize = 5;

impl<'a> Smoothed<'a> {
    fn new(problem: &'a LiftedProblem, omega_n: &CVector, penalty: f64) -> Self {
        Self {
            problem,
            omega_n: omega_n.clone(),
            linearization: outer(omega_n),
            penalty,
        }
    }

    /// `None` outside the domain (some `c_k^H U c_k <= 0`).
    fn point(&self, u: CMatrix) -> Option<Point> {
        let mut quads = Vec::with_capacity(self.problem.len());
        let mut terms = Vec::with_capacity(self.problem.len());
        for (c, w) in self.problem.vectors.iter().zip(&self.problem.weights) {
            let q = quadratic_form(&u, c);
            if !(q > 0.0) {
                return None;
            }
            quads.push(q);
            terms.push(w / q);
        }
        let aligned = quadratic_form(&u, &self.omega_n);
        Some(Point { u, quads, terms, aligned })
    }

    /// Exact (nonsmooth) linearized objective; the constant `Omega Tr(U)` is
    /// included so values match the DC objective.
    fn exact(&self, p: &Point) -> f64 {
        p.terms.iter().copied().fold(f64::NEG_INFINITY, f64::max) + self.penalty * (1.0 - p.aligned)
    }

    fn value(&self, p: &Point, sharpness: f64) -> f64 {
        log_sum_exp(&p.terms, sharpness) + self.penalty * (1.0 - p.aligned)
    }

    fn gradient(&self, p: &Point, sharpness: f64) -> CMatrix {
        let n = p.u.nrows();
        let top = p.terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = p.terms.iter().map(|t| (sharpness * (t - top)).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut grad = &self.linearization * Complex64::new(-self.penalty, 0.0);
        for (k, c) in self.problem.vectors.iter().enumerate() {
            let coeff = -(exps[k] / total) * p.terms[k] / p.quads[k];
            if coeff != 0.0 {
                grad.gerc(Complex64::new(coeff, 0.0), c, c, Complex64::new(1.0, 0.0));
            }
        }
        debug_assert_eq!(grad.nrows(), n);
        grad
    }

    fn minimize(&self, start: &CMatrix, opts: &SolverOptions) -> Result<InnerSolution> {
        let mut current = self
            .point(project_spectraplex(start))
            .ok_or_else(|| Error::domain("inner solver start is outside the objective domain"))?;
        let mut best_exact = self.exact(&current);
        let mut best = current.u.clone();
        let mut total_iterations = 0;
        let mut stationarity = f64::INFINITY;

        for (level, &relative_sharpness) in opts.sharpness.iter().enumerate() {
            // the iteration budget is shared; unused iterations carry over
            let levels_left = opts.sharpness.len() - level;
            let allowance = (opts.max_inner - total_iterations) / levels_left;
            let sharpness = relative_sharpness / self.problem.lambda(&current.u);
            let mut f = self.value(&current, sharpness);
            let mut grad = self.gradient(&current, sharpness);
            let mut history: VecDeque<f64> = VecDeque::from([f]);
            let mut step = {
                let pg = project_spectraplex(&(&current.u - &grad)) - &current.u;
                let size = pg.iter().map(|z| z.norm()).fold(0.0, f64::max);
                if size > 0.0 {
                    (1.0 / size).clamp(STEP_MIN, STEP_MAX)
                } else {
                    1.0
                }
            };

            for it in 0..allowance {
                let u = &current.u;
                if it % STATIONARITY_CHECK_EVERY == 0 {
                    stationarity = (project_spectraplex(&(u - &grad)) - u).norm();
                    if stationarity <= opts.inner_tol {
                        break;
                    }
                }
                let direction = project_spectraplex(&(u - &grad * Complex64::new(step, 0.0))) - u;
                let slope = inner(&grad, &direction);
                if !(slope < 0.0) {
                    stationarity = (project_spectraplex(&(u - &grad)) - u).norm();
                    break;
                }
                let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut t = 1.0;
                let accepted = loop {
                    match self.point(u + &direction * Complex64::new(t, 0.0)) {
                        Some(candidate) => {
                            let v = self.value(&candidate, sharpness);
                            if v <= reference + ARMIJO * t * slope {
                                break Some((candidate, v));
                            }
                            // safeguarded quadratic interpolation
                            let denom = 2.0 * (v - f - t * slope);
                            let trial = if denom > 0.0 { -slope * t * t / denom } else { 0.5 * t };
                            t = trial.clamp(0.1 * t, 0.5 * t);
                        }
                        None => t *= 0.5,
                    }
                    if t < 1e-16 {
                        break None;
                    }
                };
                let Some((candidate, f_new)) = accepted else { break };
                if !f_new.is_finite() {
                    return Err(Error::Stall("non-finite smoothed objective".into()));
                }
                total_iterations += 1;
                let new_grad = self.gradient(&candidate, sharpness);
                let s = &candidate.u - u;
                let y = &new_grad - &grad;
                let sy = inner(&s, &y);
                step = if sy > 0.0 {
                    (inner(&s, &s) / sy).clamp(STEP_MIN, STEP_MAX)
                } else {
                    STEP_MAX
                };
                let exact = self.exact(&candidate);
                if exact < best_exact {
                    best_exact = exact;
                    best = candidate.u.clone();
                }
                current = candidate;
                grad = new_grad;
                f = f_new;
                history.push_back(f);
                if history.len() > LINE_SEARCH_MEMORY {
                    history.pop_front();
                }
            }
            // continue from the best point found so far
            current = self.point(best.clone()).expect("best iterate is in the domain");
        }

        let lambda = self.problem.lambda(&best);
        Ok(InnerSolution {
            u: best,
            lambda,
            iterations: total_iterations,
            stationarity,
        })
    }
}

fn log_sum_exp(terms: &[f64], sharpness: f64) -> f64 {
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (sharpness * (t - top)).exp()).sum();
    top + sum.ln() / sharpness
}
