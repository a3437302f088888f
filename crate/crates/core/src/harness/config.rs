//! Experiment and estimation settings.

use serde::{Deserialize, Serialize};

use crate::balancing::{RhoFamily, SolverOptions};
use crate::env::{make_sim_env, target_policy, EnvSpec, PolicySpec};
use crate::{Error, Result};

/// Estimators a pipeline run can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Projected balancing weights.
    Proposed,
    /// Balancing weights on the unprojected features.
    Balance,
    /// Linear-sieve Q estimate.
    Ql,
    /// Augmented estimator built on the proposed weights.
    Aug,
    /// Linear fitted-Q evaluation.
    Fqe,
    /// Per-decision importance sampling.
    Is,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Proposed => "proposed",
            EstimatorKind::Balance => "balance",
            EstimatorKind::Ql => "ql",
            EstimatorKind::Aug => "aug",
            EstimatorKind::Fqe => "fqe",
            EstimatorKind::Is => "is",
        }
    }

    pub fn all() -> [EstimatorKind; 6] {
        use EstimatorKind::*;
        [Proposed, Balance, Ql, Aug, Fqe, Is]
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

/// A benchmark policy id or an explicit policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetChoice {
    Id(u32),
    Spec(PolicySpec),
}

impl TargetChoice {
    pub fn resolve(&self) -> Result<PolicySpec> {
        let spec = match self {
            TargetChoice::Id(id) => target_policy(*id)?,
            TargetChoice::Spec(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Basis used by the weights and the linear Q estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisChoice {
    /// Tensor cubic B-splines with quantile knots.
    #[default]
    Spline,
    /// Indicators of a finite state-action space.
    Indicator { num_states: usize },
}

/// Distribution `G` of the initial state that defines the policy value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// The environment's own initial distribution.
    #[default]
    EnvInitial,
    /// `N(0, I_d)`.
    StandardNormal { dim: usize },
    /// The observed first states of the trajectories, equally weighted.
    Empirical,
    /// A finite distribution given as `(state, probability)` pairs.
    Discrete { support: Vec<(Vec<f64>, f64)> },
}

/// Everything the single-dataset pipeline needs apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSettings {
    pub gamma: f64,
    pub estimators: Vec<EstimatorKind>,
    pub basis: BasisChoice,
    /// Overrides the sample-size rule for `K`.
    pub k: Option<usize>,
    /// Ridge parameters for cross-validation; the default is
    /// `10^{-6..2} · trace(G)/nT`.
    pub mu_grid: Option<Vec<f64>>,
    pub cv_folds: usize,
    /// Absolute `δ` values; the default is 25 log-spaced points from
    /// `1e−8` to `1` times `‖l_K‖∞`.
    pub delta_grid: Option<Vec<f64>>,
    pub rho: RhoFamily,
    pub solver: SolverOptions,
    pub alpha: f64,
    pub adjust: f64,
    /// Monte Carlo draws from `G` for `l_K`.
    pub l_k_draws: usize,
    pub fqe_iterations: usize,
    /// Ridge for the linear Q systems; default `1e−8 · trace`.
    pub ridge: Option<f64>,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            estimators: vec![EstimatorKind::Proposed],
            basis: BasisChoice::Spline,
            k: None,
            mu_grid: None,
            cv_folds: 5,
            delta_grid: None,
            rho: RhoFamily::Quadratic,
            solver: SolverOptions::default(),
            alpha: 0.05,
            adjust: 1.2,
            l_k_draws: 100_000,
            fqe_iterations: 500,
            ridge: None,
        }
    }
}

impl EstimationSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.estimators.is_empty() {
            return bad("no estimators requested".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.adjust >= 1.0) {
            return bad("alpha must lie in (0, 1) and adjust must be >= 1".into());
        }
        if self.l_k_draws == 0 || self.fqe_iterations == 0 || self.cv_folds < 2 {
            return bad("l_k_draws and fqe_iterations must be positive and cv_folds at least 2".into());
        }
        if let Some(grid) = &self.mu_grid {
            if grid.is_empty() || grid.iter().any(|m| !(*m >= 0.0)) {
                return bad("mu_grid must be non-empty and nonnegative".into());
            }
        }
        if let Some(grid) = &self.delta_grid {
            if grid.is_empty() || grid.iter().any(|d| !(*d >= 0.0)) {
                return bad("delta_grid must be non-empty and nonnegative".into());
            }
        }
        Ok(())
    }

    pub fn wants(&self, kind: EstimatorKind) -> bool {
        self.estimators.contains(&kind)
    }
}

/// How the true policy value is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSpec {
    /// Average of `(1 − γ) Σ_t γ^t R_t` over simulated paths.
    MonteCarlo { n_paths: usize, horizon: Option<usize>, seed: u64 },
    /// Exact value; tabular environments only.
    Exact,
    /// A known value.
    Fixed { value: f64 },
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec::MonteCarlo { n_paths: 200_000, horizon: None, seed: 20_240_601 }
    }
}

/// A replicated simulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub behavior: PolicySpec,
    pub policy: TargetChoice,
    pub n: usize,
    pub horizon: usize,
    pub reference: ReferenceSpec,
    pub truth: TruthSpec,
    pub replications: usize,
    pub base_seed: u64,
    pub settings: EstimationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: make_sim_env(),
            behavior: PolicySpec::Bernoulli { p: 0.5 },
            policy: TargetChoice::Id(4),
            n: 40,
            horizon: 50,
            reference: ReferenceSpec::EnvInitial,
            truth: TruthSpec::default(),
            replications: 100,
            base_seed: 1,
            settings: EstimationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.behavior.validate()?;
        self.policy.resolve()?;
        self.settings.validate()?;
        if self.n == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("n and horizon must be positive".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
