//! Kernel ridge projection of next-state basis averages onto `(S, A)`.
//!
//! For every basis function `B_k` the target `Σ_a' π(a'|S') B_k(S', a')` is
//! regressed on the current state-action pair with a Gaussian kernel. All
//! `K` targets share one Cholesky factorization. Identical inputs are
//! merged before factorizing: with `Z` the row-to-unique-input map and
//! `C = ZᵀZ`, the coefficients on the unique inputs are
//! `C^{1/2} (C^{1/2} G_u C^{1/2} + μI)^{-1} C^{-1/2} ZᵀY`, which gives the
//! same fitted function as `(G + μI)^{-1} Y` on the full Gram matrix.

use std::collections::HashMap;

use faer::{Mat, MatRef};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::basis::FeatureMatrices;
use crate::dataset::Dataset;
use crate::env::rng_from_seed;
use crate::linalg;
use crate::{Error, Result};

const MEDIAN_SUBSAMPLE: usize = 2000;

/// Median pairwise Euclidean distance over at most 2000 points (a
/// seed-determined subsample when there are more). If more than half of
/// the pairs coincide, the median over the non-zero distances is used.
pub fn median_heuristic(points: &[Vec<f64>], seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("median heuristic needs at least two points".into()));
    }
    let chosen: Vec<&Vec<f64>> = if points.len() > MEDIAN_SUBSAMPLE {
        let mut rng = rng_from_seed(seed);
        let mut idx = index::sample(&mut rng, points.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &points[i]).collect()
    } else {
        points.iter().collect()
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for (i, x) in chosen.iter().enumerate() {
        for y in &chosen[i + 1..] {
            dists.push(x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    let med = median(&mut dists);
    if med > 0.0 {
        return Ok(med);
    }
    let mut nonzero: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    log::warn!("median pairwise distance is zero; using the median of non-zero distances");
    Ok(median(&mut nonzero))
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Gaussian kernel `exp(−‖x − y‖² / (2σ²))` on encoded state-action pairs.
///
/// A pair is encoded as the z-scored state followed by a one-hot action
/// scaled by `action_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_scale: f64,
    pub num_actions: usize,
}

impl KernelSpec {
    /// Standardization from the pooled states of `dataset`, action scale
    /// from the median standardized-state distance, bandwidth from the
    /// median heuristic on the encoded pairs.
    pub fn from_dataset(dataset: &Dataset, seed: u64) -> Result<Self> {
        let d = dataset.state_dim();
        let n = dataset.len() as f64;
        let mut mean = vec![0.0; d];
        for step in dataset.steps() {
            for (m, s) in mean.iter_mut().zip(&step.state) {
                *m += s / n;
            }
        }
        let mut var = vec![0.0; d];
        for step in dataset.steps() {
            for j in 0..d {
                var[j] += (step.state[j] - mean[j]).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        let mut spec =
            Self { bandwidth: 1.0, state_mean: mean, state_scale: scale, action_scale: 1.0, num_actions: dataset.num_actions() };
        let states: Vec<Vec<f64>> = dataset.steps().map(|s| spec.standardize(&s.state)).collect();
        spec.action_scale = median_heuristic(&states, seed).unwrap_or(1.0);
        let encoded: Vec<Vec<f64>> = dataset.steps().map(|s| spec.encode(&s.state, s.action)).collect();
        spec.bandwidth = median_heuristic(&encoded, seed)?;
        Ok(spec)
    }

    fn standardize(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.state_mean).zip(&self.state_scale).map(|((s, m), c)| (s - m) / c).collect()
    }

    pub fn encode(&self, state: &[f64], action: usize) -> Vec<f64> {
        let mut out = self.standardize(state);
        out.extend((0..self.num_actions).map(|a| if a == action { self.action_scale } else { 0.0 }));
        out
    }

    /// Encoded `(S_it, A_it)` rows in dataset order.
    pub fn encode_dataset(&self, dataset: &Dataset) -> Mat<f64> {
        let rows: Vec<Vec<f64>> = dataset.steps().map(|s| self.encode(&s.state, s.action)).collect();
        linalg::from_rows(&rows, self.input_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.state_mean.len() + self.num_actions
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    /// Cross Gram matrix `k(a_i, b_j)`.
    pub fn gram(&self, a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
        let rows_a: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rows_b: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
        Mat::from_fn(rows_a.len(), rows_b.len(), |i, j| self.eval(&rows_a[i], &rows_b[j]))
    }
}

/// Fitted multi-output kernel ridge regression.
#[derive(Debug, Clone)]
pub struct ProjectionModel {
    pub kernel: KernelSpec,
    /// Distinct training inputs.
    pub centers: Mat<f64>,
    /// Coefficients on `centers`, one column per target.
    pub coef: Mat<f64>,
    pub mu: f64,
    /// Diagonal jitter that the factorization needed (0 if none).
    pub jitter: f64,
}

struct Dedup {
    centers: Vec<Vec<f64>>,
    counts: Vec<f64>,
    map: Vec<usize>,
}

fn dedup_rows(inputs: MatRef<'_, f64>) -> Dedup {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut centers = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut map = Vec::with_capacity(inputs.nrows());
    for row in inputs.row_iter() {
        let values: Vec<f64> = row.iter().copied().collect();
        let key: Vec<u64> = values.iter().map(|v| (v + 0.0).to_bits()).collect();
        let id = *seen.entry(key).or_insert_with(|| {
            centers.push(values);
            counts.push(0.0);
            centers.len() - 1
        });
        counts[id] += 1.0;
        map.push(id);
    }
    Dedup { centers, counts, map }
}

/// Deduplicated, count-scaled regression system shared by every ridge
/// parameter on the same training data.
struct KrrSystem {
    centers: Mat<f64>,
    root: Vec<f64>,
    scaled_gram: Mat<f64>,
    scaled_targets: Mat<f64>,
    base_jitter: f64,
}

impl KrrSystem {
    fn new(kernel: &KernelSpec, inputs: MatRef<'_, f64>, targets: MatRef<'_, f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() || inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("inputs and targets must have the same non-zero row count".into()));
        }
        let k = targets.ncols();
        let dd = dedup_rows(inputs);
        let u = dd.centers.len();
        let centers = linalg::from_rows(&dd.centers, inputs.ncols());
        let root: Vec<f64> = dd.counts.iter().map(|c| c.sqrt()).collect();
        let mut agg = Mat::<f64>::zeros(u, k);
        for (row, &id) in dd.map.iter().enumerate() {
            for j in 0..k {
                agg[(id, j)] += targets[(row, j)];
            }
        }
        for i in 0..u {
            for j in 0..k {
                agg[(i, j)] /= root[i];
            }
        }
        let gram = kernel.gram(centers.as_ref(), centers.as_ref());
        let scaled_gram = Mat::from_fn(u, u, |i, j| root[i] * gram[(i, j)] * root[j]);
        let base_jitter = 1e-10 * linalg::trace(&scaled_gram) / inputs.nrows() as f64;
        Ok(Self { centers, root, scaled_gram, scaled_targets: agg, base_jitter })
    }

    fn solve(&self, mu: f64) -> Result<(Mat<f64>, f64)> {
        let (mut coef, jitter) = linalg::spd_solve(&self.scaled_gram, mu, self.scaled_targets.as_ref(), self.base_jitter, 8)?;
        for (i, r) in self.root.iter().enumerate() {
            for j in 0..coef.ncols() {
                coef[(i, j)] *= r;
            }
        }
        Ok((coef, jitter))
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("ridge parameter {mu} must be finite and >= 0")))
    }
}

/// Fits all target columns of `targets` on encoded `inputs` with ridge
/// parameter `mu`, reusing one factorization.
pub fn krr_fit_multi(kernel: &KernelSpec, inputs: MatRef<'_, f64>, targets: MatRef<'_, f64>, mu: f64) -> Result<ProjectionModel> {
    check_mu(mu)?;
    let system = KrrSystem::new(kernel, inputs, targets)?;
    let (coef, jitter) = system.solve(mu)?;
    Ok(ProjectionModel { kernel: kernel.clone(), centers: system.centers, coef, mu, jitter })
}

/// Predictions `G_query · coef` at encoded query points (`m × K`).
pub fn krr_predict(model: &ProjectionModel, queries: MatRef<'_, f64>) -> Mat<f64> {
    let cross = model.kernel.gram(queries, model.centers.as_ref());
    cross * &model.coef
}

/// `10^{-6}, …, 10^{2}` times `trace(G)/nT` (which is 1 for the Gaussian kernel).
pub fn default_mu_grid() -> Vec<f64> {
    (-6..=2).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub mu: f64,
    /// `(μ, averaged standardized validation error)` over the grid.
    pub errors: Vec<(f64, f64)>,
}

/// Row indices of each fold. Whole trajectories are assigned to folds
/// (shuffled by `seed`); with fewer trajectories than folds the rows are
/// cut into contiguous blocks instead.
pub fn fold_rows(dataset: &Dataset, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let horizon = dataset.horizon();
    let mut out = vec![Vec::new(); folds];
    if dataset.n() >= folds {
        let mut order: Vec<usize> = (0..dataset.n()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        for (pos, traj) in order.into_iter().enumerate() {
            out[pos % folds].extend(traj * horizon..(traj + 1) * horizon);
        }
    } else {
        let total = dataset.len();
        for (f, rows) in out.iter_mut().enumerate() {
            rows.extend(f * total / folds..(f + 1) * total / folds);
        }
    }
    out
}

fn select_rows(m: MatRef<'_, f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// k-fold choice of the ridge parameter. The criterion for each `μ` is
/// `Σ_k SSE_k / ((nT)⁻¹ Σ B_k²)` over validation rows, averaged over
/// folds; ties go to the smaller `μ`. Basis functions with zero empirical
/// second moment are skipped.
pub fn cv_select_mu(
    dataset: &Dataset,
    kernel: &KernelSpec,
    features: &FeatureMatrices,
    mu_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvOutcome> {
    if mu_grid.is_empty() {
        return Err(Error::InvalidArgument("empty ridge grid".into()));
    }
    mu_grid.iter().try_for_each(|&mu| check_mu(mu))?;
    let mut grid = mu_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    if grid.len() == 1 {
        return Ok(CvOutcome { mu: grid[0], errors: vec![(grid[0], f64::NAN)] });
    }
    if folds < 2 || dataset.len() < folds {
        return Err(Error::InvalidArgument(format!("cannot run {folds}-fold cross-validation on {} rows", dataset.len())));
    }
    let n = features.rows();
    let k = features.b.ncols();
    let second_moment: Vec<f64> =
        (0..k).map(|j| (0..n).map(|i| features.b[(i, j)].powi(2)).sum::<f64>() / n as f64).collect();
    let skipped = second_moment.iter().filter(|&&m| m == 0.0).count();
    if skipped > 0 {
        log::warn!("{skipped} basis functions have zero empirical second moment and are left out of the CV criterion");
    }
    let inputs = kernel.encode_dataset(dataset);
    let parts = fold_rows(dataset, folds, seed);
    let mut totals = vec![0.0; grid.len()];
    for (f, valid) in parts.iter().enumerate() {
        let train: Vec<usize> = parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, r)| r.iter().copied()).collect();
        let x_train = select_rows(inputs.as_ref(), &train);
        let y_train = select_rows(features.phi_next.as_ref(), &train);
        let x_valid = select_rows(inputs.as_ref(), valid);
        let y_valid = select_rows(features.phi_next.as_ref(), valid);
        let system = KrrSystem::new(kernel, x_train.as_ref(), y_train.as_ref())?;
        let cross = kernel.gram(x_valid.as_ref(), system.centers.as_ref());
        for (g, &mu) in grid.iter().enumerate() {
            let (coef, _) = system.solve(mu)?;
            let pred = &cross * &coef;
            let mut err = 0.0;
            for j in (0..k).filter(|&j| second_moment[j] > 0.0) {
                let sse: f64 = (0..valid.len()).map(|i| (pred[(i, j)] - y_valid[(i, j)]).powi(2)).sum();
                err += sse / second_moment[j];
            }
            totals[g] += err / folds as f64;
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if totals[g] < totals[best] {
            best = g;
        }
    }
    Ok(CvOutcome { mu: grid[best], errors: grid.into_iter().zip(totals).collect() })
}

/// Fitted projection with in-sample `Ĝ` and `L̂ = B − γ·Ĝ`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub model: ProjectionModel,
    pub ghat: Mat<f64>,
    pub lhat: Mat<f64>,
}

pub fn project_features(
    dataset: &Dataset,
    kernel: &KernelSpec,
    features: &FeatureMatrices,
    gamma: f64,
    mu: f64,
) -> Result<Projection> {
    let inputs = kernel.encode_dataset(dataset);
    let model = krr_fit_multi(kernel, inputs.as_ref(), features.phi_next.as_ref(), mu)?;
    let ghat = krr_predict(&model, inputs.as_ref());
    let lhat = Mat::from_fn(ghat.nrows(), ghat.ncols(), |i, j| features.b[(i, j)] - gamma * ghat[(i, j)]);
    Ok(Projection { model, ghat, lhat })
}
