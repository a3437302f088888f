//! One dataset in, value estimates out.

use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::balancing::{balance_residuals, default_delta_grid, min_feasible_delta, psi_diagnostic, DualProblem, DualSolution};
use crate::basis::{build_basis, choose_k, compute_features, compute_l_k, l_k_exact, BasisSet, FeatureMatrices, IndicatorBasis};
use crate::dataset::Dataset;
use crate::env::{EnvSpec, Environment, PolicySpec};
use crate::estimators::{
    augmented_value, confidence_interval, fqe_fit, is_value, q_sieve_fit, q_value_estimate, QModel, ValueEstimate,
};
use crate::projection::{cv_select_mu, default_mu_grid, krr_predict, project_features, CvOutcome, KernelSpec, Projection};
use crate::{Error, Result, Mat};

use super::config::{BasisChoice, EstimationSettings, EstimatorKind, ReferenceSpec};

/// `splitmix64` finalizer, used to derive independent seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-task `tag` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix_seed(seed ^ mix_seed(tag))
}

type Sampler = Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>;

/// A reference distribution ready for computing `l_K`.
#[derive(Clone)]
pub enum Reference {
    Sampler(Sampler),
    Support(Vec<(Vec<f64>, f64)>),
}

impl std::fmt::Debug for Reference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reference::Sampler(_) => f.write_str("Reference::Sampler"),
            Reference::Support(s) => f.debug_tuple("Reference::Support").field(s).finish(),
        }
    }
}

impl Reference {
    pub fn resolve(spec: &ReferenceSpec, env: Option<&EnvSpec>, dataset: &Dataset) -> Result<Self> {
        Ok(match spec {
            ReferenceSpec::EnvInitial => match env {
                Some(EnvSpec::Tabular(mdp)) => {
                    Reference::Support((0..mdp.num_states).map(|s| (vec![s as f64], mdp.initial[s])).collect())
                }
                Some(env) => {
                    let env = env.clone();
                    Reference::Sampler(Arc::new(move |rng: &mut dyn RngCore| env.sample_initial(rng)))
                }
                None => return Err(Error::InvalidArgument("the env_initial reference needs an environment".into())),
            },
            ReferenceSpec::StandardNormal { dim } => {
                let dim = *dim;
                Reference::Sampler(Arc::new(move |rng: &mut dyn RngCore| {
                    (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect()
                }))
            }
            ReferenceSpec::Empirical => {
                let w = 1.0 / dataset.n() as f64;
                Reference::Support(dataset.trajectories().iter().map(|t| (t.initial_state().to_vec(), w)).collect())
            }
            ReferenceSpec::Discrete { support } => {
                let total: f64 = support.iter().map(|(_, p)| p).sum();
                if support.is_empty() || (total - 1.0).abs() > 1e-9 || support.iter().any(|(_, p)| *p < 0.0) {
                    return Err(Error::InvalidArgument("discrete reference must be a probability distribution".into()));
                }
                Reference::Support(support.clone())
            }
        })
    }
}

/// Weights from one balancing solve and the `δ` that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancingFit {
    pub delta: f64,
    pub psi: f64,
    pub solution: DualSolution,
}

impl BalancingFit {
    pub fn max_abs_residual(&self) -> f64 {
        self.solution.residuals.iter().map(|r| r.abs()).fold(0.0, f64::max)
    }

    pub fn mean_weight(&self) -> f64 {
        self.solution.weights.iter().sum::<f64>() / self.solution.weights.len() as f64
    }
}

/// Estimates plus the intermediate objects behind them.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimates: Vec<ValueEstimate>,
    pub basis: BasisSet,
    pub l_k: Vec<f64>,
    pub features: FeatureMatrices,
    pub kernel: Option<KernelSpec>,
    pub cv: Option<CvOutcome>,
    pub projection: Option<Projection>,
    pub proposed: Option<BalancingFit>,
    pub balance: Option<BalancingFit>,
    pub q_model: Option<QModel>,
}

fn make_basis(dataset: &Dataset, settings: &EstimationSettings) -> Result<BasisSet> {
    match settings.basis {
        BasisChoice::Spline => build_basis(dataset, settings.k.unwrap_or_else(|| choose_k(dataset.n(), dataset.horizon()))),
        BasisChoice::Indicator { num_states } => {
            if num_states == 0 {
                return Err(Error::InvalidArgument("indicator basis needs at least one state".into()));
            }
            Ok(BasisSet::Indicator(IndicatorBasis { num_states, num_actions: dataset.num_actions() }))
        }
    }
}

fn fit_balancing(features: Mat<f64>, l_k: &[f64], settings: &EstimationSettings) -> Result<BalancingFit> {
    let psi = psi_diagnostic(&features)?;
    let base = DualProblem::new(features, l_k.to_vec(), vec![0.0; l_k.len()])?;
    let grid = match &settings.delta_grid {
        Some(grid) => grid.clone(),
        None => default_delta_grid(l_k.iter().map(|v| v.abs()).fold(0.0, f64::max)),
    };
    let (delta, solution) = min_feasible_delta(&base, settings.rho, &grid, &settings.solver)?;
    Ok(BalancingFit { delta, psi, solution })
}

fn weighted_estimate(
    method: &str,
    fit: &BalancingFit,
    rewards: &[f64],
    features: &FeatureMatrices,
    q: &QModel,
    settings: &EstimationSettings,
) -> Result<ValueEstimate> {
    let mut est = confidence_interval(&fit.solution.weights, rewards, features, q, settings.gamma, settings.alpha, settings.adjust)?;
    est.method = method.into();
    let d = &mut est.diagnostics;
    d.delta = Some(fit.delta);
    d.psi = Some(fit.psi);
    d.converged = Some(fit.solution.converged);
    d.iterations = Some(fit.solution.iterations);
    d.max_abs_residual = Some(fit.max_abs_residual());
    d.mean_weight = Some(fit.mean_weight());
    d.ridge = Some(q.ridge);
    Ok(est)
}

/// Runs the configured estimators on `dataset`.
///
/// `behavior` is only needed for importance sampling. `seed` drives the
/// Monte Carlo draws for `l_K`, the bandwidth subsample and the fold
/// assignment.
pub fn estimate_dataset(
    dataset: &Dataset,
    target: &PolicySpec,
    behavior: Option<&PolicySpec>,
    reference: &Reference,
    settings: &EstimationSettings,
    seed: u64,
) -> Result<PipelineOutput> {
    settings.validate()?;
    target.validate()?;
    let gamma = settings.gamma;
    let basis = make_basis(dataset, settings)?;
    let l_k = match reference {
        Reference::Support(support) => l_k_exact(&basis, target, support, gamma),
        Reference::Sampler(sampler) => {
            compute_l_k(&basis, target, sampler.as_ref(), gamma, settings.l_k_draws, derive_seed(seed, 1))?
        }
    };
    let features = compute_features(&basis, dataset, target);
    let rewards = dataset.rewards();

    let needs_projection = settings.wants(EstimatorKind::Proposed) || settings.wants(EstimatorKind::Aug);
    let needs_q = settings.estimators.iter().any(|k| !matches!(k, EstimatorKind::Fqe | EstimatorKind::Is));

    let (mut kernel, mut cv, mut projection, mut proposed) = (None, None, None, None);
    if needs_projection {
        let spec = KernelSpec::from_dataset(dataset, derive_seed(seed, 2))?;
        let grid = settings.mu_grid.clone().unwrap_or_else(default_mu_grid);
        let folds = settings.cv_folds.min(dataset.n().max(2));
        let outcome = cv_select_mu(dataset, &spec, &features, &grid, folds, derive_seed(seed, 3))?;
        let proj = project_features(dataset, &spec, &features, gamma, outcome.mu)?;
        proposed = Some(fit_balancing(proj.lhat.clone(), &l_k, settings)?);
        kernel = Some(spec);
        cv = Some(outcome);
        projection = Some(proj);
    }
    let balance = if settings.wants(EstimatorKind::Balance) {
        Some(fit_balancing(features.naive(gamma), &l_k, settings)?)
    } else {
        None
    };
    let q_model = if needs_q { Some(q_sieve_fit(&features, &rewards, gamma, settings.ridge)?) } else { None };

    let mut estimates = Vec::with_capacity(settings.estimators.len());
    for &kind in &settings.estimators {
        let est = match kind {
            EstimatorKind::Proposed => {
                let fit = proposed.as_ref().expect("projection fitted");
                let mut est = weighted_estimate(kind.name(), fit, &rewards, &features, q_model.as_ref().expect("q fitted"), settings)?;
                est.diagnostics.mu = cv.as_ref().map(|c| c.mu);
                est.diagnostics.bandwidth = kernel.as_ref().map(|k| k.bandwidth);
                est
            }
            EstimatorKind::Balance => {
                let fit = balance.as_ref().expect("balance fitted");
                weighted_estimate(kind.name(), fit, &rewards, &features, q_model.as_ref().expect("q fitted"), settings)?
            }
            EstimatorKind::Ql => {
                let q = q_model.as_ref().expect("q fitted");
                let mut est = ValueEstimate::point(kind.name(), q_value_estimate(q, &l_k));
                est.diagnostics.ridge = Some(q.ridge);
                est
            }
            EstimatorKind::Aug => {
                let q = q_model.as_ref().expect("q fitted");
                let fit = proposed.as_ref().expect("projection fitted");
                let value = augmented_value(&fit.solution.weights, q, &l_k, &features, &rewards, gamma)?;
                let mut est = ValueEstimate::point(kind.name(), value);
                est.diagnostics.delta = Some(fit.delta);
                est.diagnostics.ridge = Some(q.ridge);
                est
            }
            EstimatorKind::Fqe => {
                let fit = fqe_fit(&features, &rewards, gamma, settings.fqe_iterations, settings.ridge)?;
                let mut est = ValueEstimate::point(kind.name(), q_value_estimate(&fit.model, &l_k));
                est.diagnostics.converged = Some(fit.converged);
                est.diagnostics.iterations = Some(fit.iterations);
                est.diagnostics.ridge = Some(fit.model.ridge);
                est
            }
            EstimatorKind::Is => {
                let behavior = behavior
                    .ok_or_else(|| Error::InvalidArgument("importance sampling needs the behavior policy".into()))?;
                ValueEstimate::point(kind.name(), is_value(dataset, behavior, target, gamma)?)
            }
        };
        estimates.push(est);
    }
    Ok(PipelineOutput { estimates, basis, l_k, features, kernel, cv, projection, proposed, balance, q_model })
}

/// Contrast between unprojected and projected features for two tuples
/// sharing `(s, a)` but with different next states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedDimensionCheck {
    pub naive_rows_differ: bool,
    pub naive_max_abs_diff: f64,
    pub projected_max_abs_diff: f64,
}

/// Summary printed by `diagnose`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub k: usize,
    pub psi_projected: f64,
    pub psi_naive: f64,
    pub mu: f64,
    pub bandwidth: f64,
    pub cv_errors: Vec<(f64, f64)>,
    pub delta: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    pub mean_weight: f64,
    pub balance_delta: Option<f64>,
    pub expanded_dimension: Option<ExpandedDimensionCheck>,
}

/// Runs the projected pipeline on `dataset` and reports its tuning
/// selections and balance diagnostics.
pub fn diagnose(
    dataset: &Dataset,
    target: &PolicySpec,
    reference: &Reference,
    settings: &EstimationSettings,
    seed: u64,
) -> Result<DiagnoseReport> {
    let mut settings = settings.clone();
    settings.estimators = vec![EstimatorKind::Proposed, EstimatorKind::Balance];
    let out = estimate_dataset(dataset, target, None, reference, &settings, seed)?;
    let fit = out.proposed.as_ref().expect("proposed fitted");
    let naive = out.features.naive(settings.gamma);
    let residuals = balance_residuals(&fit.solution.weights, &out.projection.as_ref().expect("projected").lhat, &out.l_k);
    Ok(DiagnoseReport {
        k: out.basis.dim(),
        psi_projected: fit.psi,
        psi_naive: psi_diagnostic(&naive)?,
        mu: out.cv.as_ref().expect("cv ran").mu,
        bandwidth: out.kernel.as_ref().expect("kernel built").bandwidth,
        cv_errors: out.cv.as_ref().expect("cv ran").errors.clone(),
        delta: fit.delta,
        converged: fit.solution.converged,
        iterations: fit.solution.iterations,
        max_abs_residual: fit.max_abs_residual(),
        mean_weight: fit.mean_weight(),
        residuals,
        balance_delta: out.balance.as_ref().map(|b| b.delta),
        expanded_dimension: expanded_dimension_check(dataset, target, &out, settings.gamma),
    })
}

/// Pairs the first tuple `(s, a, s')` with the next state `s''` of the
/// first other tuple whose next state differs, and compares the feature
/// rows of `(s, a, s')` and `(s, a, s'')`.
pub fn expanded_dimension_check(
    dataset: &Dataset,
    target: &PolicySpec,
    out: &PipelineOutput,
    gamma: f64,
) -> Option<ExpandedDimensionCheck> {
    let steps: Vec<_> = dataset.steps().collect();
    let first = steps.first()?;
    let other = steps.iter().find(|s| s.next_state != first.next_state)?;
    let phi_a = out.basis.policy_average(target, &first.next_state);
    let phi_b = out.basis.policy_average(target, &other.next_state);
    let naive_max_abs_diff = phi_a.iter().zip(&phi_b).map(|(a, b)| (gamma * (a - b)).abs()).fold(0.0, f64::max);
    let projected_max_abs_diff = match (&out.kernel, &out.projection) {
        (Some(kernel), Some(proj)) => {
            let x = kernel.encode(&first.state, first.action);
            let queries = Mat::from_fn(2, x.len(), |_, j| x[j]);
            let pred = krr_predict(&proj.model, queries.as_ref());
            (0..pred.ncols()).map(|j| (gamma * (pred[(0, j)] - pred[(1, j)])).abs()).fold(0.0, f64::max)
        }
        _ => return None,
    };
    Some(ExpandedDimensionCheck { naive_rows_differ: naive_max_abs_diff > 0.0, naive_max_abs_diff, projected_max_abs_diff })
}
