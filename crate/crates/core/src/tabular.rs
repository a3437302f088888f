//! Finite MDPs with exact policy values and visitation ratios.
//!
//! States are encoded as the one-coordinate vector `[s as f64]` so that a
//! tabular MDP can drive the same simulation and estimation code as the
//! continuous environments.

use faer::Mat;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{tabular_index, Environment, Policy};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`, received on taking `a` in `s`.
    pub rewards: Vec<Vec<f64>>,
    /// Distribution of the first state of each trajectory.
    pub initial: Vec<f64>,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-10
}

fn random_simplex(len: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    // Uniform exponential spacings give a flat Dirichlet draw.
    let raw: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_states == 0 || self.num_actions == 0 {
            return bad("tabular MDP needs at least one state and action".into());
        }
        if self.transitions.len() != self.num_states || self.rewards.len() != self.num_states {
            return bad("transition/reward tables must have one row per state".into());
        }
        for s in 0..self.num_states {
            if self.transitions[s].len() != self.num_actions || self.rewards[s].len() != self.num_actions {
                return bad(format!("state {s}: wrong number of actions"));
            }
            for a in 0..self.num_actions {
                let row = &self.transitions[s][a];
                if row.len() != self.num_states || !is_distribution(row) {
                    return bad(format!("P[{s}][{a}] is not a probability vector"));
                }
                if !self.rewards[s][a].is_finite() {
                    return bad(format!("reward[{s}][{a}] is not finite"));
                }
            }
        }
        if self.initial.len() != self.num_states || !is_distribution(&self.initial) {
            return bad("initial distribution is not a probability vector".into());
        }
        Ok(())
    }

    /// Random MDP with strictly positive transition probabilities and
    /// rewards in `[-1, 1]`.
    pub fn random(num_states: usize, num_actions: usize, rng: &mut dyn RngCore) -> Self {
        let transitions = (0..num_states)
            .map(|_| (0..num_actions).map(|_| random_simplex(num_states, rng)).collect())
            .collect();
        let rewards = (0..num_states)
            .map(|_| (0..num_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let initial = random_simplex(num_states, rng);
        Self { num_states, num_actions, transitions, rewards, initial }
    }

    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// `π(a|s)` as a table.
    pub fn policy_table(&self, policy: &dyn Policy) -> Vec<Vec<f64>> {
        (0..self.num_states).map(|s| policy.probs(&[s as f64])).collect()
    }

    /// State-action transition matrix `P^π[(s,a), (s',a')] = P(s'|s,a) π(a'|s')`.
    pub fn state_action_transition(&self, policy: &dyn Policy) -> Mat<f64> {
        let pi = self.policy_table(policy);
        let m = self.num_states * self.num_actions;
        Mat::from_fn(m, m, |row, col| {
            let (s, a) = (row / self.num_actions, row % self.num_actions);
            let (s2, a2) = (col / self.num_actions, col % self.num_actions);
            self.transitions[s][a][s2] * pi[s2][a2]
        })
    }

    /// `Q^π` from `(I − γ P^π) Q = r`, indexed `[s][a]`.
    pub fn q_function(&self, policy: &dyn Policy, gamma: f64) -> Result<Vec<Vec<f64>>> {
        use faer::linalg::solvers::Solve;
        let m = self.num_states * self.num_actions;
        let p = self.state_action_transition(policy);
        let system = Mat::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * p[(i, j)]);
        let rhs = Mat::from_fn(m, 1, |i, _| self.rewards[i / self.num_actions][i % self.num_actions]);
        let q = system.partial_piv_lu().solve(&rhs);
        if (0..m).any(|i| !q[(i, 0)].is_finite()) {
            return Err(Error::Factorization("singular Bellman system".into()));
        }
        Ok((0..self.num_states)
            .map(|s| (0..self.num_actions).map(|a| q[(self.pair(s, a), 0)]).collect())
            .collect())
    }

    /// Marginal `p_t(s, a)` for `t = 0, 1, …` starting from `start` under
    /// `policy`, one table per step, `steps` tables in total.
    pub fn marginals(&self, policy: &dyn Policy, start: &[f64], steps: usize) -> Vec<Vec<Vec<f64>>> {
        let pi = self.policy_table(policy);
        let mut out = Vec::with_capacity(steps);
        let mut state_dist = start.to_vec();
        for _ in 0..steps {
            let joint: Vec<Vec<f64>> = (0..self.num_states)
                .map(|s| (0..self.num_actions).map(|a| state_dist[s] * pi[s][a]).collect())
                .collect();
            let mut next = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    for (s2, n) in next.iter_mut().enumerate() {
                        *n += joint[s][a] * self.transitions[s][a][s2];
                    }
                }
            }
            out.push(joint);
            state_dist = next;
        }
        out
    }

    /// Average visitation `p̄_T(s,a) = T⁻¹ Σ_{t<T} p_t(s,a)`.
    pub fn average_visitation(&self, policy: &dyn Policy, start: &[f64], horizon: usize) -> Vec<Vec<f64>> {
        let marg = self.marginals(policy, start, horizon);
        let mut avg = vec![vec![0.0; self.num_actions]; self.num_states];
        for table in &marg {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    avg[s][a] += table[s][a] / horizon as f64;
                }
            }
        }
        avg
    }

    /// Discounted visitation `d^π(s,a) = (1 − γ) Σ_t γ^t p_t^π(s,a)`,
    /// truncated once `γ^t < 1e-12`.
    pub fn discounted_visitation(&self, policy: &dyn Policy, gamma: f64, reference: &[f64]) -> Vec<Vec<f64>> {
        let steps = if gamma <= 0.0 { 1 } else { ((1e-12f64).ln() / gamma.ln()).floor() as usize + 1 };
        let marg = self.marginals(policy, reference, steps);
        let mut d = vec![vec![0.0; self.num_actions]; self.num_states];
        let mut discount = 1.0 - gamma;
        for table in &marg {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    d[s][a] += discount * table[s][a];
                }
            }
            discount *= gamma;
        }
        d
    }
}

impl Environment for TabularMdp {
    fn state_dim(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![sample_index(&self.initial, rng) as f64]
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn RngCore) -> (Vec<f64>, f64) {
        let s = tabular_index(state);
        let next = sample_index(&self.transitions[s][action], rng);
        (vec![next as f64], self.rewards[s][action])
    }
}

fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `(1 − γ) Σ_s G(s) Σ_a π(a|s) Q^π(s,a)`.
pub fn exact_policy_value(mdp: &TabularMdp, policy: &dyn Policy, gamma: f64, reference: &[f64]) -> Result<f64> {
    let q = mdp.q_function(policy, gamma)?;
    let pi = mdp.policy_table(policy);
    let mut value = 0.0;
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            value += reference[s] * pi[s][a] * q[s][a];
        }
    }
    Ok((1.0 - gamma) * value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub discounted: Vec<Vec<f64>>,
    pub behavior_average: Vec<Vec<f64>>,
    pub ratio: Vec<Vec<f64>>,
}

impl RatioTable {
    pub fn at(&self, state: &[f64], action: usize) -> f64 {
        self.ratio[tabular_index(state)][action]
    }
}

/// `ω^π(s,a) = d^π(s,a) / p̄_T^b(s,a)`, where `p̄_T^b` averages the behavior
/// marginals started from `data_initial` over `t < T`. Pairs never reached
/// by either distribution get ratio 0.
pub fn exact_ratio(
    mdp: &TabularMdp,
    target: &dyn Policy,
    behavior: &dyn Policy,
    gamma: f64,
    horizon: usize,
    reference: &[f64],
    data_initial: &[f64],
) -> Result<RatioTable> {
    let discounted = mdp.discounted_visitation(target, gamma, reference);
    let behavior_average = mdp.average_visitation(behavior, data_initial, horizon);
    let mut ratio = vec![vec![0.0; mdp.num_actions]; mdp.num_states];
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            let (d, p) = (discounted[s][a], behavior_average[s][a]);
            if p > 0.0 {
                ratio[s][a] = d / p;
            } else if d > 0.0 {
                return Err(Error::CoverageViolation { state: s, action: a });
            }
        }
    }
    Ok(RatioTable { discounted, behavior_average, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{monte_carlo_truth, rng_from_seed, PolicySpec};

    fn one_state(reward: f64) -> TabularMdp {
        TabularMdp {
            num_states: 1,
            num_actions: 1,
            transitions: vec![vec![vec![1.0]]],
            rewards: vec![vec![reward]],
            initial: vec![1.0],
        }
    }

    fn uniform(actions: usize, states: usize) -> PolicySpec {
        PolicySpec::Tabular { probs: vec![vec![1.0 / actions as f64; actions]; states] }
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = one_state(1.0);
        let pi = uniform(1, 1);
        let q = mdp.q_function(&pi, 0.9).unwrap();
        assert!((q[0][0] - 10.0).abs() < 1e-12);
        assert!((exact_policy_value(&mdp, &pi, 0.9, &[1.0]).unwrap() - 1.0).abs() < 1e-12);
        for r in [-2.0, 0.3, 7.0] {
            for g in [0.0, 0.5, 0.99] {
                let v = exact_policy_value(&one_state(r), &pi, g, &[1.0]).unwrap();
                assert!((v - r).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gamma_zero_is_immediate_reward() {
        let mut rng = rng_from_seed(1);
        let mdp = TabularMdp::random(3, 2, &mut rng);
        let pi = PolicySpec::Tabular { probs: vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![1.0, 0.0]] };
        let g = [0.3, 0.3, 0.4];
        let expected: f64 = (0..3)
            .map(|s| g[s] * (0..2).map(|a| pi.prob(&[s as f64], a) * mdp.rewards[s][a]).sum::<f64>())
            .sum();
        assert!((exact_policy_value(&mdp, &pi, 0.0, &g).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn exact_value_agrees_with_monte_carlo() {
        let mut rng = rng_from_seed(2);
        let mdp = TabularMdp::random(2, 2, &mut rng);
        let pi = PolicySpec::Tabular { probs: vec![vec![0.3, 0.7], vec![0.9, 0.1]] };
        let exact = exact_policy_value(&mdp, &pi, 0.8, &mdp.initial).unwrap();
        let mc = monte_carlo_truth(&mdp, &pi, 0.8, 20_000, None, 4).unwrap();
        assert!((exact - mc.value).abs() < 3.0 * mc.std_error, "{exact} vs {mc:?}");
    }

    #[test]
    fn constant_reward_monte_carlo_is_exact() {
        let mut rng = rng_from_seed(8);
        let mut mdp = TabularMdp::random(3, 2, &mut rng);
        mdp.rewards = vec![vec![1.5; 2]; 3];
        // 0.9^260 < 1e-11 keeps the truncation error below the tolerance.
        let truth = monte_carlo_truth(&mdp, &uniform(2, 3), 0.9, 50, Some(260), 1).unwrap();
        assert!((truth.value - 1.5).abs() < 1e-10);
    }

    #[test]
    fn ratio_normalization_and_gamma_zero() {
        let mut rng = rng_from_seed(5);
        let mdp = TabularMdp::random(3, 2, &mut rng);
        let target = PolicySpec::Tabular { probs: vec![vec![0.1, 0.9], vec![0.6, 0.4], vec![0.5, 0.5]] };
        let behavior = uniform(2, 3);
        let g = [0.2, 0.5, 0.3];
        for gamma in [0.0, 0.5, 0.9] {
            let table = exact_ratio(&mdp, &target, &behavior, gamma, 7, &g, &mdp.initial).unwrap();
            let mut total = 0.0;
            for s in 0..3 {
                for a in 0..2 {
                    total += table.behavior_average[s][a] * table.ratio[s][a];
                    if gamma == 0.0 {
                        let expected = g[s] * target.prob(&[s as f64], a) / table.behavior_average[s][a];
                        assert!((table.ratio[s][a] - expected).abs() < 1e-12);
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "gamma {gamma}: {total}");
        }
    }

    #[test]
    fn ratio_tends_to_one_when_target_is_behavior() {
        let mdp = TabularMdp {
            num_states: 2,
            num_actions: 1,
            transitions: vec![vec![vec![0.7, 0.3]], vec![vec![0.4, 0.6]]],
            rewards: vec![vec![0.0], vec![1.0]],
            initial: vec![0.5, 0.5],
        };
        let pi = uniform(1, 2);
        // Stationary distribution of the chain.
        let stat = [4.0 / 7.0, 3.0 / 7.0];
        let table = exact_ratio(&mdp, &pi, &pi, 0.9, 500, &stat, &mdp.initial).unwrap();
        for row in &table.ratio {
            assert!((row[0] - 1.0).abs() < 0.05, "{row:?}");
        }
    }

    #[test]
    fn unreachable_pair_with_target_mass_is_a_coverage_violation() {
        let mdp = TabularMdp {
            num_states: 2,
            num_actions: 2,
            transitions: vec![vec![vec![1.0, 0.0]; 2], vec![vec![0.0, 1.0]; 2]],
            rewards: vec![vec![0.0; 2]; 2],
            initial: vec![1.0, 0.0],
        };
        let target = uniform(2, 2);
        let behavior = PolicySpec::Tabular { probs: vec![vec![1.0, 0.0]; 2] };
        let err = exact_ratio(&mdp, &target, &behavior, 0.9, 5, &[1.0, 0.0], &mdp.initial).unwrap_err();
        assert!(matches!(err, Error::CoverageViolation { state: 0, action: 1 }));
    }
}
