//! Reference computations shared by the integration tests. Nothing here
//! calls into the crate's linear algebra.

#![allow(dead_code)]

use balancing_ope::env::Policy;
use balancing_ope::tabular::TabularMdp;

/// Gaussian elimination with partial pivoting on a dense row-major system.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        assert!(a[col][col].abs() > 1e-300, "singular system");
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// `P^π[(s,a),(s',a')] = P(s'|s,a) π(a'|s')`, pairs indexed `s · A + a`.
pub fn pair_transition(mdp: &TabularMdp, policy: &dyn Policy) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut out = vec![vec![0.0; ns * na]; ns * na];
    for s in 0..ns {
        for a in 0..na {
            for s2 in 0..ns {
                let pi = policy.probs(&[s2 as f64]);
                for a2 in 0..na {
                    out[s * na + a][s2 * na + a2] = mdp.transitions[s][a][s2] * pi[a2];
                }
            }
        }
    }
    out
}

/// `Q = (I − γ P^π)⁻¹ r` over state-action pairs.
pub fn bellman_q(mdp: &TabularMdp, policy: &dyn Policy, gamma: f64) -> Vec<f64> {
    let p = pair_transition(mdp, policy);
    let m = p.len();
    let a = (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 } - gamma * p[i][j]).collect())
        .collect();
    let r = (0..mdp.num_states).flat_map(|s| mdp.rewards[s].clone()).collect();
    solve_dense(a, r)
}

/// Closed-form dual solution of the quadratic family at `δ = 0`:
/// `λ = 2 M⁻¹ (l − m̄)` with `M = (1/N) LᵀL` and `m̄` the column means of `L`.
pub fn quadratic_closed_form(rows: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let n = rows.len() as f64;
    let k = target.len();
    let mut m = vec![vec![0.0; k]; k];
    let mut mean = vec![0.0; k];
    for row in rows {
        for i in 0..k {
            mean[i] += row[i] / n;
            for j in 0..k {
                m[i][j] += row[i] * row[j] / n;
            }
        }
    }
    let rhs = (0..k).map(|i| 2.0 * (target[i] - mean[i])).collect();
    solve_dense(m, rhs)
}
