//! Balancing weights through the dual program
//! `min_λ (1/N) Σ_i ρ(L_iᵀλ) − λᵀl + Σ_k δ_k |λ_k|`, with weights `ρ'(Lλ)`.
//!
//! The smooth part's gradient is the balance residual
//! `r = (1/N) Lᵀω − l`, so at the optimum `r_k = −δ_k sign(λ_k)` wherever
//! `λ_k ≠ 0` and `|r_k| ≤ δ_k` elsewhere.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::basis::{compute_features, BasisSet};
use crate::dataset::Dataset;
use crate::env::Policy;
use crate::linalg;
use crate::{Error, Result};

/// Primal penalty `h` and its conjugate transform
/// `ρ(t) = t·(h')⁻¹(t) − h((h')⁻¹(t))`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoFamily {
    /// `h(x) = (x − 1)²`.
    #[default]
    Quadratic,
    /// `h(x) = (x − 1) log x` on `x > 0`.
    Entropy,
}

impl RhoFamily {
    pub fn h(self, x: f64) -> f64 {
        match self {
            RhoFamily::Quadratic => (x - 1.0).powi(2),
            RhoFamily::Entropy => (x - 1.0) * x.ln(),
        }
    }

    pub fn h_prime(self, x: f64) -> f64 {
        match self {
            RhoFamily::Quadratic => 2.0 * (x - 1.0),
            RhoFamily::Entropy => x.ln() + 1.0 - 1.0 / x,
        }
    }

    pub fn h_prime_inv(self, t: f64) -> f64 {
        match self {
            RhoFamily::Quadratic => t / 2.0 + 1.0,
            RhoFamily::Entropy => entropy_h_prime_inv(t),
        }
    }

    pub fn rho(self, t: f64) -> f64 {
        match self {
            RhoFamily::Quadratic => t * t / 4.0 + t,
            RhoFamily::Entropy => {
                let x = entropy_h_prime_inv(t);
                t * x - self.h(x)
            }
        }
    }

    pub fn rho_prime(self, t: f64) -> f64 {
        self.h_prime_inv(t)
    }

    pub fn rho_second(self, t: f64) -> f64 {
        match self {
            RhoFamily::Quadratic => 0.5,
            RhoFamily::Entropy => {
                // 1 / h''(x) with h''(x) = 1/x + 1/x².
                let x = entropy_h_prime_inv(t);
                x * x / (x + 1.0)
            }
        }
    }
}

/// Solves `ln x + 1 − 1/x = t` by Newton's method in `u = ln x`; the map
/// `u ↦ u + 1 − e^{−u}` is increasing and concave, so Newton from the
/// right of the root converges monotonically.
fn entropy_h_prime_inv(t: f64) -> f64 {
    let g = |u: f64| u + 1.0 - (-u).exp() - t;
    // Start right of the root: g(max(t, 0)) >= 0.
    let mut u = t.max(0.0);
    for _ in 0..200 {
        let step = g(u) / (1.0 + (-u).exp());
        u -= step;
        if step.abs() <= 1e-15 * (1.0 + u.abs()) {
            break;
        }
    }
    u.exp()
}

/// A dual program instance: feature rows `L` (`N × K`), target moments `l`
/// and per-coordinate tolerances `δ ≥ 0`.
#[derive(Debug, Clone)]
pub struct DualProblem {
    pub features: Mat<f64>,
    pub target: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DualProblem {
    pub fn new(features: Mat<f64>, target: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        let k = features.ncols();
        if features.nrows() == 0 || k == 0 {
            return Err(Error::InvalidArgument("empty feature matrix".into()));
        }
        if target.len() != k || delta.len() != k {
            return Err(Error::InvalidArgument(format!(
                "feature matrix has {k} columns but target has {} and delta {}",
                target.len(),
                delta.len()
            )));
        }
        if delta.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument("delta must be finite and nonnegative".into()));
        }
        Ok(Self { features, target, delta })
    }

    pub fn with_uniform_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.features.clone(), self.target.clone(), vec![delta; self.target.len()])
    }

    fn rows(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative objective-change tolerance.
    pub tol: f64,
    /// Tolerance on the ∞-norm of the composite gradient mapping.
    pub grad_tol: f64,
    /// The objective-change rule only stops the solver once the gradient
    /// mapping is also below this bound.
    pub guard_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, grad_tol: 1e-10, guard_tol: 1e-7, max_iter: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    pub weights: Vec<f64>,
    pub delta: Vec<f64>,
    /// Objective after each accepted iteration (first entry at `λ = 0`).
    pub objective_trace: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl DualSolution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial objective")
    }
}

struct Smooth {
    value: f64,
    grad: Vec<f64>,
}

fn scores(problem: &DualProblem, lambda: &[f64]) -> Vec<f64> {
    linalg::to_vec((&problem.features * linalg::col_vec(lambda)).as_ref())
}

fn smooth_value(problem: &DualProblem, rho: RhoFamily, lambda: &[f64]) -> f64 {
    let n = problem.rows() as f64;
    let s = scores(problem, lambda);
    s.iter().map(|&t| rho.rho(t)).sum::<f64>() / n - dot(lambda, &problem.target)
}

fn smooth_eval(problem: &DualProblem, rho: RhoFamily, lambda: &[f64]) -> Smooth {
    let n = problem.rows() as f64;
    let s = scores(problem, lambda);
    let value = s.iter().map(|&t| rho.rho(t)).sum::<f64>() / n - dot(lambda, &problem.target);
    let weights: Vec<f64> = s.iter().map(|&t| rho.rho_prime(t)).collect();
    let grad = balance_residuals(&weights, &problem.features, &problem.target);
    Smooth { value, grad }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(lambda: &[f64], delta: &[f64]) -> f64 {
    lambda.iter().zip(delta).map(|(l, d)| d * l.abs()).sum()
}

/// Weighted soft-thresholding; `|v| = threshold` maps to 0.
fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v.abs() <= threshold {
        0.0
    } else {
        v - threshold * v.signum()
    }
}

fn prox_step(point: &[f64], grad: &[f64], step: f64, delta: &[f64]) -> Vec<f64> {
    point.iter().zip(grad).zip(delta).map(|((p, g), d)| soft_threshold(p - step * g, step * d)).collect()
}

fn inf_norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// Gradient-mapping ∞-norm at `lambda` with the given step.
fn gradient_mapping(problem: &DualProblem, rho: RhoFamily, lambda: &[f64], step: f64) -> f64 {
    let g = smooth_eval(problem, rho, lambda).grad;
    let p = prox_step(lambda, &g, step, &problem.delta);
    inf_norm(lambda.iter().zip(&p).map(|(a, b)| (a - b) / step))
}

/// Largest eigenvalue of `(1/N) LᵀL` by power iteration (an estimate).
fn spectral_estimate(features: &Mat<f64>) -> f64 {
    let k = features.ncols();
    let gram = linalg::crossprod(features.as_ref(), 1.0 / features.nrows() as f64);
    let mut v = Mat::from_fn(k, 1, |i, _| 1.0 + 0.01 * i as f64);
    let mut est = 0.0;
    for _ in 0..50 {
        let w = &gram * &v;
        let norm = w.col(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / v.col(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w;
        v *= faer::Scale(1.0 / norm);
    }
    est
}

/// Monotone accelerated proximal gradient with backtracking and adaptive
/// restart, started at `λ = 0`.
///
/// Stops when the composite gradient mapping drops below `grad_tol`, or
/// when the relative objective change drops below `tol` while the mapping
/// is below `guard_tol`. Returns the last iterate with `converged = false`
/// after `max_iter` iterations, and `PrimalInfeasible` once the objective
/// falls below `−1/tol`.
pub fn solve_dual(problem: &DualProblem, rho: RhoFamily, options: &SolverOptions) -> Result<DualSolution> {
    let k = problem.target.len();
    let curvature = spectral_estimate(&problem.features) * rho.rho_second(0.0);
    let mut step = if curvature > 0.0 { 1.0 / (1.1 * curvature) } else { 1.0 };
    let mut x = vec![0.0; k];
    let mut x_prev = x.clone();
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut fx = smooth_value(problem, rho, &x) + l1(&x, &problem.delta);
    let mut trace = vec![fx];
    let mut converged = false;
    let mut iterations = 0;
    let floor = -1.0 / options.tol;

    while iterations < options.max_iter {
        iterations += 1;
        let sy = smooth_eval(problem, rho, &y);
        let (z, fz_smooth) = loop {
            let z = prox_step(&y, &sy.grad, step, &problem.delta);
            let fz = smooth_value(problem, rho, &z);
            let d: Vec<f64> = z.iter().zip(&y).map(|(a, b)| a - b).collect();
            let model = sy.value + dot(&sy.grad, &d) + dot(&d, &d) / (2.0 * step);
            if fz <= model + 1e-13 * (1.0 + sy.value.abs()) || step < 1e-300 {
                break (z, fz);
            }
            step /= 2.0;
        };
        let fz = fz_smooth + l1(&z, &problem.delta);
        let mapping = inf_norm(y.iter().zip(&z).map(|(a, b)| (a - b) / step));

        let previous = fx;
        let accepted = fz <= fx;
        x_prev.clone_from(&x);
        if accepted {
            x.clone_from(&z);
            fx = fz;
        }
        trace.push(fx);
        if fx < floor {
            return Err(Error::PrimalInfeasible { delta: problem.delta.iter().copied().fold(0.0, f64::max) });
        }

        // Restart when the step opposes the momentum direction.
        let opposes = dot(
            &y.iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<_>>(),
            &z.iter().zip(&x_prev).map(|(a, b)| a - b).collect::<Vec<_>>(),
        ) > 0.0;
        let next_momentum = if opposes || !accepted { 1.0 } else { (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0 };
        if next_momentum == 1.0 {
            y.clone_from(&x);
        } else {
            y = (0..k)
                .map(|i| x[i] + (momentum / next_momentum) * (z[i] - x[i]) + ((momentum - 1.0) / next_momentum) * (x[i] - x_prev[i]))
                .collect();
        }
        momentum = next_momentum;

        let rel_change = (previous - fx).abs() / fx.abs().max(1.0);
        let candidate = mapping <= options.grad_tol || (accepted && rel_change < options.tol && mapping <= options.guard_tol);
        if candidate {
            let at_x = gradient_mapping(problem, rho, &x, step);
            if at_x <= options.grad_tol || (rel_change < options.tol && at_x <= options.guard_tol) {
                converged = true;
                break;
            }
        }
    }
    if converged {
        let mut current = gradient_mapping(problem, rho, &x, step);
        for _ in 0..5 {
            let Some(candidate) = newton_polish(problem, rho, &x) else { break };
            let fc = smooth_value(problem, rho, &candidate) + l1(&candidate, &problem.delta);
            let mc = gradient_mapping(problem, rho, &candidate, step);
            if !(fc <= fx && mc < current) {
                break;
            }
            x = candidate;
            fx = fc;
            current = mc;
            trace.push(fx);
        }
    } else {
        log::debug!("dual solver stopped after {iterations} iterations without converging");
    }
    let weights: Vec<f64> = scores(problem, &x).into_iter().map(|t| rho.rho_prime(t)).collect();
    let residuals = balance_residuals(&weights, &problem.features, &problem.target);
    Ok(DualSolution { lambda: x, weights, delta: problem.delta.clone(), objective_trace: trace, residuals, converged, iterations })
}

/// One Newton step on the coordinates that are nonzero or unpenalised,
/// holding the signs of the others fixed. On that support the objective
/// is smooth, so the step removes the slow first-order tail on
/// ill-conditioned problems (it is exact for the quadratic family).
fn newton_polish(problem: &DualProblem, rho: RhoFamily, lambda: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..lambda.len()).filter(|&k| lambda[k] != 0.0 || problem.delta[k] == 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let n = problem.rows();
    let s = scores(problem, lambda);
    let scaled = Mat::from_fn(n, support.len(), |i, j| rho.rho_second(s[i]).sqrt() * problem.features[(i, support[j])]);
    let hessian = linalg::crossprod(scaled.as_ref(), 1.0 / n as f64);
    let grad = smooth_eval(problem, rho, lambda).grad;
    let rhs = Mat::from_fn(support.len(), 1, |j, _| {
        let k = support[j];
        -(grad[k] + problem.delta[k] * lambda[k].signum())
    });
    let step = linalg::lu_solve(&hessian, rhs.as_ref()).ok()?;
    let mut out = lambda.to_vec();
    for (j, &k) in support.iter().enumerate() {
        out[k] += step[(j, 0)];
    }
    Some(out)
}

/// `r_k = (1/N) Σ_i ω_i L_ik − l_k`.
pub fn balance_residuals(weights: &[f64], features: &Mat<f64>, target: &[f64]) -> Vec<f64> {
    let n = features.nrows() as f64;
    let moments = features.transpose() * linalg::col_vec(weights);
    (0..target.len()).map(|k| moments[(k, 0)] / n - target[k]).collect()
}

/// `10^{-8}, …, 10^{0}` (25 log-spaced points) times `scale`.
pub fn default_delta_grid(scale: f64) -> Vec<f64> {
    (0..25).map(|i| scale * 10f64.powf(-8.0 + 8.0 * i as f64 / 24.0)).collect()
}

/// Scans `grid` upward for the first `δ` (applied to every coordinate) at
/// which the dual solve converges without diverging.
pub fn min_feasible_delta(
    base: &DualProblem,
    rho: RhoFamily,
    grid: &[f64],
    options: &SolverOptions,
) -> Result<(f64, DualSolution)> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for &delta in &sorted {
        let problem = base.with_uniform_delta(delta)?;
        match solve_dual(&problem, rho, options) {
            Ok(sol) if sol.converged => return Ok((delta, sol)),
            Ok(_) => log::debug!("delta {delta:e}: no convergence"),
            Err(Error::PrimalInfeasible { .. }) => log::debug!("delta {delta:e}: dual unbounded"),
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoFeasibleDelta { largest: sorted.last().copied().unwrap_or(f64::NAN) })
}

/// Unprojected features `B(S, A) − γ Σ_a' π(a'|S') B(S', a')`.
pub fn naive_features(dataset: &Dataset, basis: &BasisSet, policy: &dyn Policy, gamma: f64) -> Mat<f64> {
    compute_features(basis, dataset, policy).naive(gamma)
}

/// Smallest eigenvalue of `(1/N) LᵀL`.
pub fn psi_diagnostic(features: &Mat<f64>) -> Result<f64> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::InvalidArgument("empty feature matrix".into()));
    }
    let gram = linalg::crossprod(features.as_ref(), 1.0 / features.nrows() as f64);
    let eig = linalg::symmetric_eigenvalues(&gram)?;
    Ok(eig.into_iter().fold(f64::INFINITY, f64::min))
}
