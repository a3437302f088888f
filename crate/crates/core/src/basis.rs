//! Sieve basis over state-action pairs.
//!
//! The spline basis is a tensor product of clamped cubic B-splines with
//! knots at sample quantiles, arranged in two blocks:
//! `B_K(s, a) = [tensor(s)·1{a = 1}, tensor(s)]`. The second block sums to
//! one at every state, so constants lie in the span.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::{rng_from_seed, tabular_index, Policy};
use crate::{Error, Result};

pub const CUBIC: usize = 3;

/// `K = 2 · ceil(max((nT)^{1/3}, 16))`.
pub fn choose_k(n: usize, horizon: usize) -> usize {
    let root = ((n * horizon) as f64).cbrt();
    let nearest = root.round();
    let root = if (root - nearest).abs() < 1e-9 { nearest } else { root };
    2 * root.max(16.0).ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Clamped knot vector: `degree + 1` copies of each boundary.
    pub fn clamped(degree: usize, lower: f64, upper: f64, interior: &[f64]) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::InvalidArgument(format!("knot span [{lower}, {upper}] is empty")));
        }
        if interior.iter().any(|&k| !(k > lower && k < upper)) || interior.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("interior knots must be sorted and strictly inside the span".into()));
        }
        let mut knots = vec![lower; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn span(&self, x: f64) -> usize {
        let last = self.num_basis() - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // Largest i in [degree, last] with knots[i] <= x.
        let (mut lo, mut hi) = (self.degree, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Writes the `degree + 1` possibly-nonzero basis values at `x` into
    /// `out` and returns the index of the first one. `x` is clamped into
    /// the knot span.
    pub fn eval_local(&self, x: f64, out: &mut [f64]) -> usize {
        let x = x.clamp(self.lower(), self.upper());
        let p = self.degree;
        let i = self.span(x);
        let mut left = [0.0; 8];
        let mut right = [0.0; 8];
        debug_assert!(p < left.len());
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[i + 1 - j];
            right[j] = self.knots[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        i - p
    }
}

/// All `num_basis` B-spline values at `x` (Cox–de Boor recursion).
pub fn eval_bspline(knots: &KnotVector, x: f64) -> Vec<f64> {
    let mut local = vec![0.0; knots.degree + 1];
    let first = knots.eval_local(x, &mut local);
    let mut out = vec![0.0; knots.num_basis()];
    out[first..first + local.len()].copy_from_slice(&local);
    out
}

/// Linear-interpolation sample quantile (`q ∈ [0, 1]`) of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cubic knots with `num_basis_1d − 4` interior knots at equally spaced
/// sample quantiles and clamped boundaries at the sample range.
pub fn quantile_knots(samples: &[f64], num_basis_1d: usize) -> Result<KnotVector> {
    quantile_knots_with_degree(samples, num_basis_1d, CUBIC)
}

pub fn quantile_knots_with_degree(samples: &[f64], num_basis_1d: usize, degree: usize) -> Result<KnotVector> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples for knot placement".into()));
    }
    if num_basis_1d < degree + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} basis functions for degree {degree}, got {num_basis_1d}",
            degree + 1
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::DegenerateSupport(lo));
    }
    let num_interior = num_basis_1d - degree - 1;
    let interior: Vec<f64> = (1..=num_interior)
        .map(|j| sorted_quantile(&sorted, j as f64 / (num_interior + 1) as f64).clamp(lo, hi))
        .map(|k| {
            // Ties at the range ends would leave the span; nudge inward.
            let eps = (hi - lo) * 1e-9;
            k.clamp(lo + eps, hi - eps)
        })
        .collect();
    KnotVector::clamped(degree, lo, hi, &interior)
}

/// Tensor-product spline basis for binary actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    knots: Vec<KnotVector>,
    per_dim: usize,
}

impl SplineBasis {
    pub fn new(knots: Vec<KnotVector>) -> Result<Self> {
        let per_dim = knots.first().map(KnotVector::num_basis).unwrap_or(0);
        if knots.is_empty() || knots.iter().any(|k| k.num_basis() != per_dim) {
            return Err(Error::InvalidArgument("every dimension needs the same number of splines".into()));
        }
        Ok(Self { knots, per_dim })
    }

    pub fn knots(&self) -> &[KnotVector] {
        &self.knots
    }

    /// Splines per dimension.
    pub fn per_dim(&self) -> usize {
        self.per_dim
    }

    /// Size of one block, `per_dim^d`.
    pub fn block_len(&self) -> usize {
        self.per_dim.pow(self.knots.len() as u32)
    }

    fn evaluate_into(&self, state: &[f64], action: usize, out: &mut [f64]) {
        let block = self.block_len();
        out.fill(0.0);
        let d = self.knots.len();
        let width = self.knots[0].degree() + 1;
        let mut firsts = [0usize; 8];
        let mut locals = [[0.0f64; 8]; 8];
        assert!(d <= 8 && width <= 8, "spline basis supports up to 8 dimensions and degree 7");
        for (j, kv) in self.knots.iter().enumerate() {
            firsts[j] = kv.eval_local(state[j], &mut locals[j][..width]);
        }
        // Iterate the width^d local tensor grid; dimension 0 is most significant.
        let mut idx = [0usize; 8];
        loop {
            let mut value = 1.0;
            let mut flat = 0;
            for j in 0..d {
                value *= locals[j][idx[j]];
                flat = flat * self.per_dim + firsts[j] + idx[j];
            }
            out[block + flat] = value;
            if action == 1 {
                out[flat] = value;
            }
            let mut j = d;
            loop {
                if j == 0 {
                    return;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < width {
                    break;
                }
                idx[j] = 0;
            }
        }
    }
}

/// Indicators `1{s = i, a = j}` of a finite state-action space, indexed
/// `i · num_actions + j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBasis {
    pub num_states: usize,
    pub num_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSet {
    Spline(SplineBasis),
    Indicator(IndicatorBasis),
}

impl BasisSet {
    /// Number of basis functions `K`.
    pub fn dim(&self) -> usize {
        match self {
            BasisSet::Spline(b) => 2 * b.block_len(),
            BasisSet::Indicator(b) => b.num_states * b.num_actions,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            BasisSet::Spline(_) => 2,
            BasisSet::Indicator(b) => b.num_actions,
        }
    }

    pub fn evaluate_into(&self, state: &[f64], action: usize, out: &mut [f64]) {
        match self {
            BasisSet::Spline(b) => b.evaluate_into(state, action, out),
            BasisSet::Indicator(b) => {
                out.fill(0.0);
                let s = tabular_index(state).min(b.num_states - 1);
                out[s * b.num_actions + action] = 1.0;
            }
        }
    }

    pub fn evaluate(&self, state: &[f64], action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(state, action, &mut out);
        out
    }

    /// `Σ_a π(a|state) B_K(state, a)`.
    pub fn policy_average_into(&self, policy: &dyn Policy, state: &[f64], probs: &mut [f64], scratch: &mut [f64], out: &mut [f64]) {
        policy.action_probs(state, probs);
        out.fill(0.0);
        for (a, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            self.evaluate_into(state, a, scratch);
            for (o, b) in out.iter_mut().zip(scratch.iter()) {
                *o += p * b;
            }
        }
    }

    pub fn policy_average(&self, policy: &dyn Policy, state: &[f64]) -> Vec<f64> {
        let mut probs = vec![0.0; self.num_actions()];
        let mut scratch = vec![0.0; self.dim()];
        let mut out = vec![0.0; self.dim()];
        self.policy_average_into(policy, state, &mut probs, &mut scratch, &mut out);
        out
    }
}

/// Builds the two-block spline basis from the pooled states of `dataset`.
///
/// The per-dimension count is `m = floor((K/2)^{1/d})`; when `2·m^d ≠ K` the
/// basis is built with `K = 2·m^d` and a warning is logged.
pub fn build_basis(dataset: &Dataset, k: usize) -> Result<BasisSet> {
    if dataset.num_actions() != 2 {
        return Err(Error::InvalidArgument("the spline basis supports binary actions only".into()));
    }
    if !k.is_multiple_of(2) || k == 0 {
        return Err(Error::InvalidArgument(format!("K = {k} must be positive and even")));
    }
    let d = dataset.state_dim();
    let half = k / 2;
    let mut m = (half as f64).powf(1.0 / d as f64).round() as usize;
    while m > 0 && m.pow(d as u32) > half {
        m -= 1;
    }
    if m < CUBIC + 1 {
        return Err(Error::InvalidArgument(format!("K = {k} gives {m} splines per dimension; need at least 4")));
    }
    if 2 * m.pow(d as u32) != k {
        log::warn!("K = {k} is not 2·m^{d}; using K = {}", 2 * m.pow(d as u32));
    }
    let knots = (0..d)
        .map(|j| {
            let column: Vec<f64> = dataset.steps().map(|s| s.state[j]).collect();
            quantile_knots(&column, m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BasisSet::Spline(SplineBasis::new(knots)?))
}

/// Row-major `nT × K` matrices in `(i, t)` order:
/// `b[i·T+t] = B_K(S_it, A_it)` and
/// `phi_next[i·T+t] = Σ_a' π(a'|S_{i,t+1}) B_K(S_{i,t+1}, a')`.
#[derive(Debug, Clone)]
pub struct FeatureMatrices {
    pub b: faer::Mat<f64>,
    pub phi_next: faer::Mat<f64>,
}

impl FeatureMatrices {
    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    /// `B − γ·Φ'`, the unprojected balancing features.
    pub fn naive(&self, gamma: f64) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.b.nrows(), self.b.ncols(), |i, j| self.b[(i, j)] - gamma * self.phi_next[(i, j)])
    }
}

pub fn compute_features(basis: &BasisSet, dataset: &Dataset, policy: &dyn Policy) -> FeatureMatrices {
    let k = basis.dim();
    let steps: Vec<_> = dataset.steps().collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = steps
        .par_iter()
        .map(|step| {
            let b = basis.evaluate(&step.state, step.action);
            let phi = basis.policy_average(policy, &step.next_state);
            (b, phi)
        })
        .collect();
    FeatureMatrices {
        b: faer::Mat::from_fn(rows.len(), k, |i, j| rows[i].0[j]),
        phi_next: faer::Mat::from_fn(rows.len(), k, |i, j| rows[i].1[j]),
    }
}

/// Monte Carlo estimate of
/// `l_K = (1 − γ) E_{S₀∼G} Σ_a π(a|S₀) B_K(S₀, a)` from `draws` samples.
pub fn compute_l_k(
    basis: &BasisSet,
    policy: &dyn Policy,
    reference: &dyn Fn(&mut dyn RngCore) -> Vec<f64>,
    gamma: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one reference draw".into()));
    }
    let mut rng = rng_from_seed(seed);
    let k = basis.dim();
    let mut acc = vec![0.0; k];
    let mut probs = vec![0.0; basis.num_actions()];
    let mut scratch = vec![0.0; k];
    let mut row = vec![0.0; k];
    for _ in 0..draws {
        let s = reference(&mut rng);
        basis.policy_average_into(policy, &s, &mut probs, &mut scratch, &mut row);
        for (a, r) in acc.iter_mut().zip(&row) {
            *a += r;
        }
    }
    let scale = (1.0 - gamma) / draws as f64;
    Ok(acc.into_iter().map(|v| v * scale).collect())
}

/// Exact `l_K` for a reference distribution with finite support.
pub fn l_k_exact(basis: &BasisSet, policy: &dyn Policy, support: &[(Vec<f64>, f64)], gamma: f64) -> Vec<f64> {
    let mut acc = vec![0.0; basis.dim()];
    for (state, weight) in support {
        for (a, v) in acc.iter_mut().zip(basis.policy_average(policy, state)) {
            *a += weight * v;
        }
    }
    acc.into_iter().map(|v| (1.0 - gamma) * v).collect()
}
