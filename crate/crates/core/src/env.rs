//! Environments, policies, trajectory simulation and Monte Carlo truth.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Step, Trajectory};
use crate::tabular::TabularMdp;
use crate::{Error, Result};

/// Seeded generator used everywhere a seed is accepted.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A stationary stochastic policy over a finite action set.
pub trait Policy: Send + Sync {
    fn num_actions(&self) -> usize;

    /// Writes `π(·|state)` into `out` (length `num_actions`).
    fn action_probs(&self, state: &[f64], out: &mut [f64]);

    fn probs(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions()];
        self.action_probs(state, &mut out);
        out
    }

    fn prob(&self, state: &[f64], action: usize) -> f64 {
        self.probs(state)[action]
    }

    fn sample_action(&self, state: &[f64], rng: &mut dyn RngCore) -> usize {
        let probs = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Serializable policy description.
///
/// `AlwaysTreat`, `Quadrant`, `Exponential` and `Bernoulli { p: 0.5 }` are
/// the four benchmark targets; `Bernoulli { p: 0.5 }` is also the behavior
/// policy of the linear-Gaussian environment. `Tabular` indexes its rows by
/// `round(state[0])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    AlwaysTreat,
    /// Action 1 iff both state coordinates are non-positive.
    Quadrant,
    /// `P(A = 1 | s) = min(1, exp(-(s1 + s2)))`.
    Exponential,
    /// Binary action with `P(A = 1) = p`, independent of the state.
    Bernoulli { p: f64 },
    Tabular { probs: Vec<Vec<f64>> },
}

/// Benchmark target policies `π₁ … π₄`.
pub fn target_policy(id: u32) -> Result<PolicySpec> {
    match id {
        1 => Ok(PolicySpec::AlwaysTreat),
        2 => Ok(PolicySpec::Quadrant),
        3 => Ok(PolicySpec::Exponential),
        4 => Ok(PolicySpec::Bernoulli { p: 0.5 }),
        other => Err(Error::UnknownPolicy(other)),
    }
}

pub fn tabular_index(state: &[f64]) -> usize {
    state[0].round().max(0.0) as usize
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Bernoulli { p } if !(0.0..=1.0).contains(p) => {
                Err(Error::InvalidArgument(format!("bernoulli probability {p} outside [0, 1]")))
            }
            PolicySpec::Tabular { probs } => {
                for (s, row) in probs.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::InvalidArgument(format!("policy row {s} is not a distribution")));
                    }
                }
                if probs.is_empty() || probs.iter().any(|r| r.len() != probs[0].len()) {
                    return Err(Error::InvalidArgument("tabular policy rows must be non-empty and equal length".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Policy for PolicySpec {
    fn num_actions(&self) -> usize {
        match self {
            PolicySpec::Tabular { probs } => probs[0].len(),
            _ => 2,
        }
    }

    fn action_probs(&self, state: &[f64], out: &mut [f64]) {
        let p1 = match self {
            PolicySpec::AlwaysTreat => 1.0,
            PolicySpec::Quadrant => {
                if state[0] <= 0.0 && state[1] <= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            PolicySpec::Exponential => (-(state[0] + state[1])).exp().clamp(0.0, 1.0),
            PolicySpec::Bernoulli { p } => *p,
            PolicySpec::Tabular { probs } => {
                out.copy_from_slice(&probs[tabular_index(state)]);
                return;
            }
        };
        out[0] = 1.0 - p1;
        out[1] = p1;
    }
}

/// A simulator with a reference initial-state distribution.
pub trait Environment: Send + Sync {
    fn state_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Draws from the initial (reference) distribution.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Returns `(next_state, reward)`.
    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> (Vec<f64>, f64);
}

/// Two-dimensional linear-Gaussian benchmark:
///
/// `S'¹ = 0.75 (2A − 1) S¹ + ε₁`, `S'² = 0.75 (1 − 2A) S² + ε₂`,
/// `R = 2 S'¹ + S'² − 0.25 (2A − 1)`, `ε ~ N(0, noise_var)` i.i.d., and
/// `S₀ ~ N(0, I₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianEnv {
    pub noise_var: f64,
}

impl Default for LinearGaussianEnv {
    fn default() -> Self {
        Self { noise_var: 0.25 }
    }
}

impl LinearGaussianEnv {
    /// Deterministic transition given the noise draw.
    pub fn transition(&self, state: &[f64], action: usize, noise: [f64; 2]) -> (Vec<f64>, f64) {
        let sign = 2.0 * action as f64 - 1.0;
        let next = vec![0.75 * sign * state[0] + noise[0], -0.75 * sign * state[1] + noise[1]];
        let reward = 2.0 * next[0] + next[1] - 0.25 * sign;
        (next, reward)
    }
}

impl Environment for LinearGaussianEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> (Vec<f64>, f64) {
        let noise = if self.noise_var > 0.0 {
            let dist = Normal::new(0.0, self.noise_var.sqrt()).expect("positive variance");
            [dist.sample(rng), dist.sample(rng)]
        } else {
            [0.0, 0.0]
        };
        self.transition(state, action, noise)
    }
}

/// The benchmark environment with its default noise level.
pub fn make_sim_env() -> EnvSpec {
    EnvSpec::Linear(LinearGaussianEnv::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Linear(LinearGaussianEnv),
    Tabular(TabularMdp),
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::Linear(env) if !(env.noise_var >= 0.0 && env.noise_var.is_finite()) => {
                Err(Error::InvalidArgument(format!("noise variance {} must be finite and >= 0", env.noise_var)))
            }
            EnvSpec::Tabular(mdp) => mdp.validate(),
            _ => Ok(()),
        }
    }
}

impl Environment for EnvSpec {
    fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Linear(e) => e.state_dim(),
            EnvSpec::Tabular(e) => e.state_dim(),
        }
    }

    fn num_actions(&self) -> usize {
        match self {
            EnvSpec::Linear(e) => e.num_actions(),
            EnvSpec::Tabular(e) => e.num_actions(),
        }
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            EnvSpec::Linear(e) => e.sample_initial(rng),
            EnvSpec::Tabular(e) => e.sample_initial(rng),
        }
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> (Vec<f64>, f64) {
        match self {
            EnvSpec::Linear(e) => e.step(state, action, rng),
            EnvSpec::Tabular(e) => e.step(state, action, rng),
        }
    }
}

/// Rolls out `n` independent trajectories of length `horizon` under
/// `behavior`. The same seed always reproduces the same dataset.
pub fn simulate_dataset(
    env: &dyn Environment,
    behavior: &dyn Policy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("n and T must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = env.sample_initial(&mut rng);
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let action = behavior.sample_action(&state, &mut rng);
            let (next_state, reward) = env.step(&state, action, &mut rng);
            steps.push(Step { state: std::mem::replace(&mut state, next_state.clone()), action, reward, next_state });
        }
        trajectories.push(Trajectory::new(steps)?);
    }
    Dataset::new(trajectories, env.num_actions())
}

/// Smallest horizon `h` with `γ^h < 1e-8`.
pub fn default_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    ((1e-8f64).ln() / gamma.ln()).floor() as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloTruth {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub horizon: usize,
}

/// `(1 − γ) · mean_paths Σ_t γ^t R_t` with paths started from the
/// environment's initial distribution.
pub fn monte_carlo_truth(
    env: &dyn Environment,
    policy: &dyn Policy,
    gamma: f64,
    n_paths: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<MonteCarloTruth> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be positive".into()));
    }
    let horizon = horizon.unwrap_or_else(|| default_horizon(gamma));
    if gamma.powi(horizon as i32) >= 1e-8 {
        return Err(Error::InvalidArgument(format!("horizon {horizon} too short: gamma^horizon >= 1e-8")));
    }
    let mut rng = rng_from_seed(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_paths {
        let mut state = env.sample_initial(&mut rng);
        let mut discount = 1.0;
        let mut ret = 0.0;
        for _ in 0..horizon {
            let action = policy.sample_action(&state, &mut rng);
            let (next, reward) = env.step(&state, action, &mut rng);
            ret += discount * reward;
            discount *= gamma;
            state = next;
        }
        let v = (1.0 - gamma) * ret;
        sum += v;
        sum_sq += v * v;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    let var = if n_paths > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(MonteCarloTruth { value: mean, std_error: (var / n).sqrt(), n_paths, horizon })
}

/// Index-of-glycemic-control reward for a glucose reading (mg/dL).
pub fn igc_reward(glucose: f64) -> f64 {
    if glucose < 80.0 {
        -(80.0 - glucose).powi(2) / 30.0
    } else if glucose < 140.0 {
        0.0
    } else {
        -(glucose - 140.0).powf(1.35) / 30.0
    }
}
