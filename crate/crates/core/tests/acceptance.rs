//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 1-3 run 300 full simulation replications and dominate the
//! runtime (roughly 3 s per replication per core).

mod common;

use std::time::Instant;

use balancing_ope::balancing::{solve_dual, DualProblem, RhoFamily, SolverOptions};
use balancing_ope::dataset::{Dataset, Step, Trajectory};
use balancing_ope::env::{monte_carlo_truth, rng_from_seed, simulate_dataset, EnvSpec, Policy, PolicySpec};
use balancing_ope::estimators::{is_value, solve_sieve, SieveMoments};
use balancing_ope::harness::{
    compute_truth, estimate_dataset, run_benchmark, BasisChoice, BenchmarkOptions, EstimationSettings, EstimatorKind,
    ExperimentConfig, MetricsTable, Reference, ReferenceSpec, ReplicationRecord, TargetChoice,
};
use balancing_ope::projection::{krr_fit_multi, krr_predict, KernelSpec};
use balancing_ope::tabular::{exact_policy_value, exact_ratio, TabularMdp};
use balancing_ope::Mat;
use rand::Rng;

const GAMMA: f64 = 0.9;
const REPS: usize = 100;

/// One converged balancing solve, for the KKT certificate.
struct SolveRecord {
    source: String,
    delta: f64,
    max_abs_residual: f64,
    mean_weight: f64,
}

impl SolveRecord {
    fn residual_ok(&self) -> bool {
        self.max_abs_residual <= self.delta + 1e-5
    }

    fn mean_weight_ok(&self) -> bool {
        (self.mean_weight - 1.0).abs() <= self.delta / (1.0 - GAMMA) + 1e-5
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct BenchmarkRun {
    table: MetricsTable,
    records: Vec<ReplicationRecord>,
}

fn benchmark(policy: u32, estimators: Vec<EstimatorKind>) -> BenchmarkRun {
    let mut config = ExperimentConfig { policy: TargetChoice::Id(policy), replications: REPS, ..Default::default() };
    config.settings.gamma = GAMMA;
    config.settings.estimators = estimators;
    let start = Instant::now();
    let truth = compute_truth(&config).expect("truth");
    let result = run_benchmark(&config, truth.value, &BenchmarkOptions::default()).expect("benchmark");
    let table = result.table.expect("all replications recorded");
    eprintln!("pi{policy}: {REPS} replications in {:.0?}\n{}", start.elapsed(), table.render());
    BenchmarkRun { table, records: result.records }
}

fn collect_solves(run: &BenchmarkRun, policy: u32, out: &mut Vec<SolveRecord>) {
    for rec in &run.records {
        for est in &rec.estimates {
            let d = &est.diagnostics;
            if d.converged != Some(true) {
                continue;
            }
            if let (Some(delta), Some(res), Some(mw)) = (d.delta, d.max_abs_residual, d.mean_weight) {
                out.push(SolveRecord {
                    source: format!("pi{policy}/{}#{}", est.method, rec.index),
                    delta,
                    max_abs_residual: res,
                    mean_weight: mw,
                });
            }
        }
    }
}

fn failures(run: &BenchmarkRun) -> usize {
    run.records.iter().filter(|r| r.error.is_some()).count()
}

/// Per-replication check on the pi4 run: the proposed estimate lands
/// within 0.2 of the truth in at least 95 of 100 replications.
fn replication_band(pi4: &BenchmarkRun) -> Verdict {
    let truth = pi4.table.truth;
    let hits = pi4
        .records
        .iter()
        .filter(|r| r.estimates.iter().any(|e| e.method == "proposed" && (e.value - truth).abs() <= 0.2))
        .count();
    verdict(hits >= 95, format!("{hits}/{} pi4 estimates within 0.2 of the truth (need >= 95)", pi4.records.len()))
}

fn criterion_1(pi4: &BenchmarkRun, pi1: &BenchmarkRun) -> Verdict {
    let p4 = pi4.table.row("proposed").expect("proposed row");
    let p1 = pi1.table.row("proposed").expect("proposed row");
    let al = p4.al_x100.unwrap_or(f64::NAN);
    let ok4 = (0.4..=1.1).contains(&p4.mse_x1000);
    let ok1 = (6.0..=12.0).contains(&p1.mse_x1000);
    let ok_al = (8.5..=11.0).contains(&al);
    verdict(
        ok4 && ok1 && ok_al && failures(pi4) == 0 && failures(pi1) == 0,
        format!(
            "pi4 MSEx1000 {:.3} ({:.3}) in [0.4, 1.1]: {ok4}; pi1 MSEx1000 {:.3} ({:.3}) in [6, 12]: {ok1}; \
             pi4 ALx100 {al:.2} in [8.5, 11]: {ok_al}; failed replications {}/{}",
            p4.mse_x1000,
            p4.mse_se_x1000,
            p1.mse_x1000,
            p1.mse_se_x1000,
            failures(pi4),
            failures(pi1)
        ),
    )
}

fn criterion_2(pi4: &BenchmarkRun) -> Verdict {
    let row = pi4.table.row("proposed").expect("proposed row");
    let ecp = row.adjusted_ecp.unwrap_or(f64::NAN);
    verdict(
        (0.90..=1.0).contains(&ecp),
        format!("pi4 adjusted ECP {ecp:.2} in [0.90, 1.00] (unadjusted {:.2})", row.ecp.unwrap_or(f64::NAN)),
    )
}

fn criterion_3(pi2: &BenchmarkRun) -> Verdict {
    let proposed = pi2.table.row("proposed").expect("proposed row").mse_x1000;
    let balance = pi2.table.row("balance").expect("balance row").mse_x1000;
    verdict(
        proposed < balance && 5.0 * proposed <= balance,
        format!("pi2 MSEx1000 proposed {proposed:.3} vs balance {balance:.3} (ratio {:.1}, need >= 5)", balance / proposed),
    )
}

fn criterion_4(solves: &mut Vec<SolveRecord>) -> Verdict {
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    for instance in 0..50u64 {
        let mut rng = rng_from_seed(4000 + instance);
        let n = rng.random_range(40..=200);
        let k = rng.random_range(2..=16);
        // First column is the constant (1 − γ) with target (1 − γ).
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|j| if j == 0 { 1.0 - GAMMA } else { rng.random_range(-1.0..1.0) + 0.2 * j as f64 / k as f64 })
                    .collect()
            })
            .collect();
        let target: Vec<f64> = (0..k).map(|j| if j == 0 { 1.0 - GAMMA } else { rng.random_range(-0.3..0.3) }).collect();
        let features = Mat::from_fn(n, k, |i, j| rows[i][j]);
        let problem = DualProblem::new(features, target.clone(), vec![0.0; k]).expect("valid problem");
        let sol = solve_dual(&problem, RhoFamily::Quadratic, &SolverOptions::default()).expect("solve");
        if !sol.converged {
            unconverged += 1;
            continue;
        }
        let exact = common::quadratic_closed_form(&rows, &target);
        let gap = sol.lambda.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
        solves.push(SolveRecord {
            source: format!("closed-form#{instance}"),
            delta: 0.0,
            max_abs_residual: sol.residuals.iter().map(|r| r.abs()).fold(0.0, f64::max),
            mean_weight: sol.weights.iter().sum::<f64>() / n as f64,
        });
    }
    verdict(
        unconverged == 0 && worst <= 1e-6,
        format!("max |lambda - closed form| = {worst:.2e} (<= 1e-6) over 50 instances; unconverged {unconverged}"),
    )
}

fn criterion_5(solves: &mut Vec<SolveRecord>) -> Verdict {
    let mut rng = rng_from_seed(505);
    let mdp = TabularMdp::random(3, 2, &mut rng);
    let env = EnvSpec::Tabular(mdp.clone());
    let behavior = PolicySpec::Tabular { probs: vec![vec![0.5, 0.5]; 3] };
    let target = PolicySpec::Tabular { probs: vec![vec![0.2, 0.8], vec![0.7, 0.3], vec![0.4, 0.6]] };
    let horizon = 50;
    let ratio = exact_ratio(&mdp, &target, &behavior, GAMMA, horizon, &mdp.initial, &mdp.initial).expect("ratio");
    let settings = EstimationSettings {
        gamma: GAMMA,
        estimators: vec![EstimatorKind::Proposed],
        basis: BasisChoice::Indicator { num_states: 3 },
        ..Default::default()
    };
    let mut medians = Vec::new();
    for n in [10, 40, 160] {
        let mut errors = Vec::new();
        for rep in 0..20u64 {
            let seed = 50_000 + 1000 * n as u64 + rep;
            let data = simulate_dataset(&env, &behavior, n, horizon, seed).expect("simulate");
            let reference = Reference::resolve(&ReferenceSpec::EnvInitial, Some(&env), &data).expect("reference");
            let out = estimate_dataset(&data, &target, None, &reference, &settings, seed ^ 0xFF).expect("pipeline");
            let fit = out.proposed.expect("proposed fit");
            let sq: f64 = data
                .steps()
                .zip(&fit.solution.weights)
                .map(|(step, w)| (w - ratio.at(&step.state, step.action)).powi(2))
                .sum();
            errors.push((sq / data.len() as f64).sqrt());
            if fit.solution.converged {
                solves.push(SolveRecord {
                    source: format!("tabular nT={}#{rep}", n * horizon),
                    delta: fit.delta,
                    max_abs_residual: fit.max_abs_residual(),
                    mean_weight: fit.mean_weight(),
                });
            }
        }
        errors.sort_by(f64::total_cmp);
        medians.push(0.5 * (errors[9] + errors[10]));
    }
    verdict(
        medians.windows(2).all(|w| w[1] < w[0]),
        format!("median weight L2 error at nT = 500, 2000, 8000: {:.4}, {:.4}, {:.4}", medians[0], medians[1], medians[2]),
    )
}

fn criterion_6(solves: &[SolveRecord]) -> Verdict {
    let residual_bad: Vec<_> = solves.iter().filter(|s| !s.residual_ok()).collect();
    let weight_bad: Vec<_> = solves.iter().filter(|s| !s.mean_weight_ok()).collect();
    let worst = weight_bad
        .iter()
        .max_by(|a, b| (a.mean_weight - 1.0).abs().total_cmp(&(b.mean_weight - 1.0).abs()))
        .map(|s| format!("; worst {} |mean(w) - 1| = {:.2e} at delta {:.1e}", s.source, (s.mean_weight - 1.0).abs(), s.delta))
        .unwrap_or_default();
    let mut by_kind = std::collections::BTreeMap::<String, (usize, usize)>::new();
    for s in solves {
        let kind = s.source.split(['#']).next().unwrap_or("").split('/').next_back().unwrap_or("").to_string();
        let kind = if kind.starts_with("tabular") { "tabular".to_string() } else { kind };
        let entry = by_kind.entry(kind).or_default();
        entry.0 += 1;
        entry.1 += usize::from(!s.mean_weight_ok());
    }
    let summary: Vec<String> = by_kind.iter().map(|(k, (n, bad))| format!("{k} {bad}/{n}")).collect();
    verdict(
        residual_bad.is_empty() && weight_bad.is_empty(),
        format!(
            "{} converged solves; residual bound violations {}; mean-weight bound violations {} [{}]{worst}",
            solves.len(),
            residual_bad.len(),
            weight_bad.len(),
            summary.join(", ")
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut worst_linear = 0.0f64;
    let mut worst_representer = 0.0f64;
    for instance in 0..20u64 {
        let mut rng = rng_from_seed(7000 + instance);
        let distinct = rng.random_range(10..40);
        let n = distinct + rng.random_range(0..20);
        let dim = rng.random_range(1..4);
        let k = rng.random_range(1..6);
        let base: Vec<Vec<f64>> = (0..distinct).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // Rows past `distinct` repeat earlier inputs.
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| base[if i < distinct { i } else { rng.random_range(0..distinct) }].clone()).collect();
        let targets: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mu = 10f64.powf(rng.random_range(-3.0..0.0));
        let kernel = KernelSpec {
            bandwidth: rng.random_range(0.5..2.0),
            state_mean: vec![0.0; dim],
            state_scale: vec![1.0; dim],
            action_scale: 1.0,
            num_actions: 0,
        };
        let x = Mat::from_fn(n, dim, |i, j| inputs[i][j]);
        let y = Mat::from_fn(n, k, |i, j| targets[i][j]);
        let model = krr_fit_multi(&kernel, x.as_ref(), y.as_ref(), mu).expect("fit");
        let fitted = krr_predict(&model, x.as_ref());

        // Linearity: fitting Y v equals fitting Y and then combining with v.
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let yv = Mat::from_fn(n, 1, |i, _| (0..k).map(|j| targets[i][j] * v[j]).sum());
        let combined = krr_predict(&krr_fit_multi(&kernel, x.as_ref(), yv.as_ref(), mu).expect("fit"), x.as_ref());
        for i in 0..n {
            let expected: f64 = (0..k).map(|j| fitted[(i, j)] * v[j]).sum();
            worst_linear = worst_linear.max((combined[(i, 0)] - expected).abs() / expected.abs().max(1.0));
        }

        // Representer: training predictions equal G (G + μI)⁻¹ Y.
        let sq_bw = 2.0 * kernel.bandwidth * kernel.bandwidth;
        let gram: Vec<Vec<f64>> = inputs
            .iter()
            .map(|a| inputs.iter().map(|b| (-a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / sq_bw).exp()).collect())
            .collect();
        for j in 0..k {
            let shifted = (0..n).map(|r| (0..n).map(|c| gram[r][c] + if r == c { mu } else { 0.0 }).collect()).collect();
            let alpha = common::solve_dense(shifted, (0..n).map(|i| targets[i][j]).collect());
            for i in 0..n {
                let expected: f64 = (0..n).map(|c| gram[i][c] * alpha[c]).sum();
                worst_representer = worst_representer.max((fitted[(i, j)] - expected).abs() / expected.abs().max(1.0));
            }
        }
    }
    verdict(
        worst_linear <= 1e-8 && worst_representer <= 1e-8,
        format!("max relative gap: linearity {worst_linear:.2e}, representer {worst_representer:.2e} (<= 1e-8) over 20 instances"),
    )
}

fn criterion_8() -> Verdict {
    let mut worst_z = 0.0f64;
    let mut worst_sieve = 0.0f64;
    for instance in 0..10u64 {
        let mut rng = rng_from_seed(8000 + instance);
        let mdp = TabularMdp::random(3, 2, &mut rng);
        let probs: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let p = rng.random_range(0.05..0.95);
                vec![p, 1.0 - p]
            })
            .collect();
        let policy = PolicySpec::Tabular { probs };
        let exact = exact_policy_value(&mdp, &policy, GAMMA, &mdp.initial).expect("exact value");
        let mc = monte_carlo_truth(&mdp, &policy, GAMMA, 20_000, None, 80 + instance).expect("monte carlo");
        worst_z = worst_z.max((exact - mc.value).abs() / mc.std_error);

        // Population sieve moments under an arbitrary positive sampling law.
        let m = 6;
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let trans = common::pair_transition(&mdp, &policy);
        let moments = SieveMoments {
            bb: Mat::from_fn(m, m, |i, j| if i == j { p[i] } else { 0.0 }),
            b_phi: Mat::from_fn(m, m, |i, j| p[i] * trans[i][j]),
            b_r: (0..m).map(|i| p[i] * mdp.rewards[i / 2][i % 2]).collect(),
        };
        let model = solve_sieve(&moments, GAMMA, Some(0.0)).expect("sieve");
        let q = common::bellman_q(&mdp, &policy, GAMMA);
        worst_sieve = worst_sieve.max(model.beta.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    verdict(
        worst_z <= 3.0 && worst_sieve <= 1e-6,
        format!("max |exact - MC| / SE = {worst_z:.2} (<= 3) over 10 MDPs; max |sieve - Bellman| = {worst_sieve:.2e} (<= 1e-6)"),
    )
}

fn criterion_9() -> Verdict {
    let mdp = TabularMdp {
        num_states: 2,
        num_actions: 2,
        transitions: vec![vec![vec![0.7, 0.3], vec![0.2, 0.8]], vec![vec![0.4, 0.6], vec![0.9, 0.1]]],
        rewards: vec![vec![1.0, -0.5], vec![2.0, 0.25]],
        initial: vec![0.35, 0.65],
    };
    let behavior = PolicySpec::Tabular { probs: vec![vec![0.6, 0.4], vec![0.3, 0.7]] };
    let target = PolicySpec::Tabular { probs: vec![vec![0.1, 0.9], vec![0.8, 0.2]] };
    let gamma = 0.8;
    let st = |s: usize| vec![s as f64];

    // Expectation of the estimator over every length-2 trajectory.
    let mut expected_is = 0.0;
    for s0 in 0..2 {
        for a0 in 0..2 {
            for s1 in 0..2 {
                for a1 in 0..2 {
                    for s2 in 0..2 {
                        let prob = mdp.initial[s0]
                            * behavior.prob(&st(s0), a0)
                            * mdp.transitions[s0][a0][s1]
                            * behavior.prob(&st(s1), a1)
                            * mdp.transitions[s1][a1][s2];
                        let steps = vec![
                            Step { state: st(s0), action: a0, reward: mdp.rewards[s0][a0], next_state: st(s1) },
                            Step { state: st(s1), action: a1, reward: mdp.rewards[s1][a1], next_state: st(s2) },
                        ];
                        let data = Dataset::new(vec![Trajectory::new(steps).expect("chain")], 2).expect("dataset");
                        expected_is += prob * is_value(&data, &behavior, &target, gamma).expect("is");
                    }
                }
            }
        }
    }

    // (1 − γ)(E_π R_0 + γ E_π R_1) by direct summation.
    let mut analytic = 0.0;
    for s0 in 0..2 {
        for a0 in 0..2 {
            let p0 = mdp.initial[s0] * target.prob(&st(s0), a0);
            analytic += p0 * mdp.rewards[s0][a0];
            for s1 in 0..2 {
                for a1 in 0..2 {
                    analytic += gamma * p0 * mdp.transitions[s0][a0][s1] * target.prob(&st(s1), a1) * mdp.rewards[s1][a1];
                }
            }
        }
    }
    analytic *= 1.0 - gamma;
    let gap = (expected_is - analytic).abs();
    verdict(gap <= 1e-12, format!("enumerated IS {expected_is:.15} vs truncated value {analytic:.15}, gap {gap:.1e} (<= 1e-12)"))
}

fn main() {
    let start = Instant::now();
    // `ACCEPTANCE_ONLY=4,7` runs a subset of the criteria.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let selected = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut solves = Vec::new();
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();

    let mut band = None;
    if [1, 2, 3, 6].into_iter().any(selected) {
        let pi4 = benchmark(4, vec![EstimatorKind::Proposed]);
        let pi1 = benchmark(1, vec![EstimatorKind::Proposed]);
        let pi2 = benchmark(2, vec![EstimatorKind::Proposed, EstimatorKind::Balance]);
        collect_solves(&pi4, 4, &mut solves);
        collect_solves(&pi1, 1, &mut solves);
        collect_solves(&pi2, 2, &mut solves);
        if selected(1) {
            verdicts.push((1, criterion_1(&pi4, &pi1)));
        }
        if selected(2) {
            verdicts.push((2, criterion_2(&pi4)));
        }
        if selected(3) {
            verdicts.push((3, criterion_3(&pi2)));
        }
        band = Some(replication_band(&pi4));
    }
    if selected(4) || selected(6) {
        let v = criterion_4(&mut solves);
        if selected(4) {
            verdicts.push((4, v));
        }
    }
    if selected(5) || selected(6) {
        let v = criterion_5(&mut solves);
        if selected(5) {
            verdicts.push((5, v));
        }
    }
    if selected(6) {
        verdicts.push((6, criterion_6(&solves)));
    }
    if selected(7) {
        verdicts.push((7, criterion_7()));
    }
    if selected(8) {
        verdicts.push((8, criterion_8()));
    }
    if selected(9) {
        verdicts.push((9, criterion_9()));
    }

    println!();
    for (c, v) in &verdicts {
        println!("criterion {c}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if let Some(band) = &band {
        println!("pipeline band: {} | {}", if band.pass { "PASS" } else { "FAIL" }, band.detail);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(c, _)| *c).collect();
    println!("acceptance finished in {:.0?}; failed criteria: {failed:?}", start.elapsed());
    if !failed.is_empty() || band.is_some_and(|b| !b.pass) {
        std::process::exit(1);
    }
}
