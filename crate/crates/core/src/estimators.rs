//! Policy-value estimators on a shared linear basis.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{BasisSet, FeatureMatrices};
use crate::dataset::Dataset;
use crate::env::Policy;
use crate::linalg;
use crate::{Error, Result};

/// `(1/N) Σ ω_i R_i`.
pub fn proposed_value(weights: &[f64], rewards: &[f64]) -> Result<f64> {
    if weights.len() != rewards.len() || weights.is_empty() {
        return Err(Error::InvalidArgument(format!("{} weights for {} rewards", weights.len(), rewards.len())));
    }
    Ok(weights.iter().zip(rewards).map(|(w, r)| w * r).sum::<f64>() / weights.len() as f64)
}

/// `Q(s, a) = B_K(s, a)ᵀ β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModel {
    pub beta: Vec<f64>,
    /// Ridge actually added to the linear system.
    pub ridge: f64,
}

impl QModel {
    pub fn q(&self, basis: &BasisSet, state: &[f64], action: usize) -> f64 {
        dot(&basis.evaluate(state, action), &self.beta)
    }

    /// `B β` and `Φ' β` per row.
    fn fitted(&self, features: &FeatureMatrices) -> (Vec<f64>, Vec<f64>) {
        let beta = linalg::col_vec(&self.beta);
        (linalg::to_vec((&features.b * &beta).as_ref()), linalg::to_vec((&features.phi_next * &beta).as_ref()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Empirical (or population) moments behind the linear Bellman system:
/// `bb = E[B Bᵀ]`, `b_phi = E[B Φ'ᵀ]`, `b_r = E[B R]`.
#[derive(Debug, Clone)]
pub struct SieveMoments {
    pub bb: Mat<f64>,
    pub b_phi: Mat<f64>,
    pub b_r: Vec<f64>,
}

impl SieveMoments {
    pub fn from_features(features: &FeatureMatrices, rewards: &[f64]) -> Result<Self> {
        let n = features.rows();
        if rewards.len() != n || n == 0 {
            return Err(Error::InvalidArgument(format!("{} rewards for {n} feature rows", rewards.len())));
        }
        let scale = 1.0 / n as f64;
        let b = features.b.as_ref();
        let b_r = linalg::to_vec(linalg::crossprod2(b, linalg::col_vec(rewards).as_ref(), scale).as_ref());
        Ok(Self { bb: linalg::crossprod(b, scale), b_phi: linalg::crossprod2(b, features.phi_next.as_ref(), scale), b_r })
    }

    fn dim(&self) -> usize {
        self.b_r.len()
    }
}

/// Ridge used when none is given: `1e−8 · |trace(M)|`, floored at 1e−300.
fn default_ridge(m: &Mat<f64>) -> f64 {
    (1e-8 * linalg::trace(m).abs()).max(1e-300)
}

/// Solves `[bb − γ·b_phi + εI] β = b_r`.
pub fn solve_sieve(moments: &SieveMoments, gamma: f64, ridge: Option<f64>) -> Result<QModel> {
    let k = moments.dim();
    let mut system = Mat::from_fn(k, k, |i, j| moments.bb[(i, j)] - gamma * moments.b_phi[(i, j)]);
    let ridge = ridge.unwrap_or_else(|| default_ridge(&system));
    for i in 0..k {
        system[(i, i)] += ridge;
    }
    let beta = linalg::lu_solve(&system, linalg::col_vec(&moments.b_r).as_ref())?;
    Ok(QModel { beta: linalg::to_vec(beta.as_ref()), ridge })
}

/// Linear-sieve solution of the sample Bellman equation.
pub fn q_sieve_fit(features: &FeatureMatrices, rewards: &[f64], gamma: f64, ridge: Option<f64>) -> Result<QModel> {
    solve_sieve(&SieveMoments::from_features(features, rewards)?, gamma, ridge)
}

/// `l_Kᵀβ`; `l_K` already carries the `(1 − γ)` factor.
pub fn q_value_estimate(model: &QModel, l_k: &[f64]) -> f64 {
    dot(&model.beta, l_k)
}

/// Extra information attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub method: String,
    pub value: f64,
    /// `σ̂`; absent for point estimators.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_ci: Option<(f64, f64)>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl ValueEstimate {
    pub fn point(method: &str, value: f64) -> Self {
        Self { method: method.into(), value, sigma: None, ci: None, adjusted_ci: None, diagnostics: Diagnostics::default() }
    }
}

/// Two-sided standard normal quantile `z_{α/2}`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

/// Weighted estimate with the Wald interval
/// `value ± z_{α/2} σ̂ / √N`, where
/// `σ̂² = (1/N) Σ [ω (R + γ Φ'β − Bβ)]²`, and the same interval with its
/// half-width multiplied by `adjust`.
pub fn confidence_interval(
    weights: &[f64],
    rewards: &[f64],
    features: &FeatureMatrices,
    model: &QModel,
    gamma: f64,
    alpha: f64,
    adjust: f64,
) -> Result<ValueEstimate> {
    let value = proposed_value(weights, rewards)?;
    if features.rows() != weights.len() {
        return Err(Error::InvalidArgument("weights and features disagree in length".into()));
    }
    let (fit, next) = model.fitted(features);
    let n = weights.len() as f64;
    let sum_sq: f64 = (0..weights.len()).map(|i| (weights[i] * (rewards[i] + gamma * next[i] - fit[i])).powi(2)).sum();
    let sigma = (sum_sq / n).sqrt();
    let half = normal_quantile(alpha)? * sigma / n.sqrt();
    Ok(ValueEstimate {
        method: "proposed".into(),
        value,
        sigma: Some(sigma),
        ci: Some((value - half, value + half)),
        adjusted_ci: Some((value - adjust * half, value + adjust * half)),
        diagnostics: Diagnostics::default(),
    })
}

/// `l_Kᵀβ + (1/N) Σ ω (R − Bβ + γ Φ'β)`.
pub fn augmented_value(weights: &[f64], model: &QModel, l_k: &[f64], features: &FeatureMatrices, rewards: &[f64], gamma: f64) -> Result<f64> {
    if weights.len() != features.rows() || rewards.len() != features.rows() {
        return Err(Error::InvalidArgument("weights, rewards and features disagree in length".into()));
    }
    let (fit, next) = model.fitted(features);
    let n = weights.len() as f64;
    let correction: f64 = (0..weights.len()).map(|i| weights[i] * (rewards[i] - fit[i] + gamma * next[i])).sum::<f64>() / n;
    Ok(q_value_estimate(model, l_k) + correction)
}

/// Per-decision importance sampling
/// `(1 − γ) (1/n) Σ_i Σ_t γ^t ρ_{i,0:t} R_{it}` with cumulative ratios
/// `ρ_{i,0:t} = Π_{j ≤ t} π(A_ij|S_ij) / b(A_ij|S_ij)`.
pub fn is_value(dataset: &Dataset, behavior: &dyn Policy, target: &dyn Policy, gamma: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, traj) in dataset.trajectories().iter().enumerate() {
        let mut ratio = 1.0;
        let mut discount = 1.0;
        for (t, step) in traj.steps().iter().enumerate() {
            let b = behavior.prob(&step.state, step.action);
            if b <= 0.0 {
                return Err(Error::ZeroPropensity { trajectory: i, t, action: step.action });
            }
            ratio *= target.prob(&step.state, step.action) / b;
            total += discount * ratio * step.reward;
            discount *= gamma;
        }
    }
    Ok((1.0 - gamma) * total / dataset.n() as f64)
}

/// Outcome of fitted-Q iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeFit {
    pub model: QModel,
    pub iterations: usize,
    pub converged: bool,
}

/// Linear fitted-Q evaluation: `β ← (bb + εI)⁻¹ (b_r + γ b_phi β)` from
/// `β = 0`, for at most `iterations` sweeps or until successive iterates
/// differ by less than 1e−8 in ∞-norm.
pub fn fqe_from_moments(moments: &SieveMoments, gamma: f64, iterations: usize, ridge: Option<f64>) -> Result<FqeFit> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("fitted-Q evaluation needs at least one iteration".into()));
    }
    let k = moments.dim();
    let mut gram = moments.bb.clone();
    let ridge = ridge.unwrap_or_else(|| default_ridge(&gram));
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    let llt = gram.llt(Side::Lower).map_err(|e| Error::Factorization(format!("regression Gram matrix: {e:?}")))?;
    let mut beta = vec![0.0; k];
    for sweep in 1..=iterations {
        let pushed = &moments.b_phi * linalg::col_vec(&beta);
        let rhs = Mat::from_fn(k, 1, |i, _| moments.b_r[i] + gamma * pushed[(i, 0)]);
        let next = linalg::to_vec(llt.solve(&rhs).as_ref());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("fitted-Q iterate is not finite".into()));
        }
        let gap = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if gap < 1e-8 {
            return Ok(FqeFit { model: QModel { beta, ridge }, iterations: sweep, converged: true });
        }
    }
    Ok(FqeFit { model: QModel { beta, ridge }, iterations, converged: false })
}

pub fn fqe_fit(features: &FeatureMatrices, rewards: &[f64], gamma: f64, iterations: usize, ridge: Option<f64>) -> Result<FqeFit> {
    fqe_from_moments(&SieveMoments::from_features(features, rewards)?, gamma, iterations, ridge)
}
