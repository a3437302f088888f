use balancing_ope::balancing::{solve_dual, DualProblem, RhoFamily, SolverOptions};
use balancing_ope::basis::{build_basis, choose_k, BasisSet};
use balancing_ope::dataset::{read_csv, CsvSchema, Dataset, Step, Trajectory};
use balancing_ope::env::{make_sim_env, rng_from_seed, simulate_dataset, target_policy, Policy, PolicySpec};
use balancing_ope::estimators::{proposed_value, ValueEstimate};
use balancing_ope::harness::{replication_seed, MetricsTable, ReplicationRecord};
use balancing_ope::projection::{krr_fit_multi, krr_predict, median_heuristic, KernelSpec};
use balancing_ope::Mat;
use proptest::prelude::*;
use rand::Rng;

fn sim_basis() -> BasisSet {
    let data = simulate_dataset(&make_sim_env(), &PolicySpec::Bernoulli { p: 0.5 }, 20, 20, 1).unwrap();
    build_basis(&data, choose_k(20, 20)).unwrap()
}

fn small_kernel(bandwidth: f64) -> KernelSpec {
    KernelSpec { bandwidth, state_mean: vec![0.0; 2], state_scale: vec![1.0; 2], action_scale: 1.0, num_actions: 0 }
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..5, 1usize..3).prop_flat_map(|(n, horizon, dim)| {
        let len = n * (horizon + 1);
        (
            prop::collection::vec(prop::collection::vec(-1e3f64..1e3, dim), len),
            prop::collection::vec((0usize..2, -1e3f64..1e3), n * horizon),
        )
            .prop_map(move |(states, decisions)| {
                let trajectories = (0..n)
                    .map(|i| {
                        let steps = (0..horizon)
                            .map(|t| {
                                let (action, reward) = decisions[i * horizon + t];
                                Step {
                                    state: states[i * (horizon + 1) + t].clone(),
                                    action,
                                    reward,
                                    next_state: states[i * (horizon + 1) + t + 1].clone(),
                                }
                            })
                            .collect();
                        Trajectory::new(steps).unwrap()
                    })
                    .collect();
                Dataset::new(trajectories, 2).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn action_free_block_is_a_partition_of_unity(s1 in -6.0f64..6.0, s2 in -6.0f64..6.0, action in 0usize..2) {
        let basis = sim_basis();
        let values = basis.evaluate(&[s1, s2], action);
        let half = basis.dim() / 2;
        prop_assert!(values.iter().all(|v| *v >= 0.0));
        prop_assert!((values[half..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let treated: f64 = values[..half].iter().sum();
        prop_assert!((treated - action as f64).abs() < 1e-12);
    }

    #[test]
    fn policy_probabilities_form_a_distribution(id in 1u32..5, s1 in -5.0f64..5.0, s2 in -5.0f64..5.0) {
        let policy = target_policy(id).unwrap();
        let probs = policy.probs(&[s1, s2]);
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dual_solution_satisfies_kkt(seed in 0u64..1000, delta in 1e-4f64..0.2, n in 30usize..80, k in 2usize..6) {
        let mut rng = rng_from_seed(seed);
        let features = Mat::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let target: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
        let problem = DualProblem::new(features, target, vec![delta; k]).unwrap();
        let sol = solve_dual(&problem, RhoFamily::Quadratic, &SolverOptions::default()).unwrap();
        prop_assert!(sol.converged);
        for (r, l) in sol.residuals.iter().zip(&sol.lambda) {
            prop_assert!(r.abs() <= delta + 1e-6);
            if *l != 0.0 {
                prop_assert!((r + delta * l.signum()).abs() < 1e-6);
            }
        }
        prop_assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn projection_is_linear_in_targets(v in prop::collection::vec(-3.0f64..3.0, 3), mu in 1e-3f64..1.0) {
        let n = 25;
        let x = Mat::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = Mat::from_fn(n, 3, |i, j| ((i + 1) as f64 * (j + 1) as f64).sin());
        let kernel = small_kernel(0.8);
        let fitted = krr_predict(&krr_fit_multi(&kernel, x.as_ref(), y.as_ref(), mu).unwrap(), x.as_ref());
        let yv = Mat::from_fn(n, 1, |i, _| (0..3).map(|j| y[(i, j)] * v[j]).sum());
        let combined = krr_predict(&krr_fit_multi(&kernel, x.as_ref(), yv.as_ref(), mu).unwrap(), x.as_ref());
        for i in 0..n {
            let expected: f64 = (0..3).map(|j| fitted[(i, j)] * v[j]).sum();
            prop_assert!((combined[(i, 0)] - expected).abs() < 1e-10 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn median_heuristic_is_translation_invariant_and_scale_equivariant(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 3..30),
        shift in -100.0f64..100.0,
        scale in 0.1f64..10.0,
    ) {
        prop_assume!(median_heuristic(&points, 0).is_ok());
        let base = median_heuristic(&points, 0).unwrap();
        let shifted: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v + shift).collect()).collect();
        let scaled: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
        prop_assert!((median_heuristic(&shifted, 0).unwrap() - base).abs() < 1e-9 * base.max(1.0));
        prop_assert!((median_heuristic(&scaled, 0).unwrap() - scale * base).abs() < 1e-9 * (scale * base).max(1.0));
    }

    #[test]
    fn csv_round_trip(data in dataset_strategy()) {
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn weighted_value_is_linear_in_rewards(
        pairs in prop::collection::vec((0.0f64..3.0, -5.0f64..5.0), 1..40),
        c in -4.0f64..4.0,
    ) {
        let (w, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
        let base = proposed_value(&w, &r).unwrap();
        prop_assert!((proposed_value(&w, &scaled).unwrap() - c * base).abs() < 1e-10 * (1.0 + base.abs()));
    }

    #[test]
    fn metrics_stay_in_range(
        errors in prop::collection::vec((-1.0f64..1.0, 0.0f64..0.5), 1..30),
        truth in -1.0f64..1.0,
    ) {
        let records: Vec<ReplicationRecord> = errors
            .iter()
            .enumerate()
            .map(|(i, (e, half))| {
                let mut est = ValueEstimate::point("proposed", truth + e);
                est.ci = Some((truth + e - half, truth + e + half));
                ReplicationRecord { index: i, seed: replication_seed(1, i), estimates: vec![est], error: None }
            })
            .collect();
        let table = MetricsTable::from_records(&records, truth, &["proposed".to_string()]).unwrap();
        let row = table.row("proposed").unwrap();
        prop_assert!(row.mse_x1000 >= 0.0 && row.mese_x1000 >= 0.0);
        let ecp = row.ecp.unwrap();
        prop_assert!((0.0..=1.0).contains(&ecp));
        prop_assert!(row.al_x100.unwrap() >= 0.0);
    }

    #[test]
    fn replication_seeds_are_distinct(base in any::<u64>(), i in 0usize..1000, j in 0usize..1000) {
        prop_assume!(i != j);
        prop_assert_ne!(replication_seed(base, i), replication_seed(base, j));
    }
}
