use std::sync::Arc;

use genius_core::aeh::{run_workflow, RoleModels, RunOptions, RunStore};
use genius_core::analytics::*;
use genius_core::kg::KnowledgeGraph;
use genius_core::llm::ModelHierarchy;
use genius_core::scenario::{scripted_backends, shipped_scenarios};
use proptest::prelude::*;

#[test]
fn shipped_fractions_fit_matches_reference_solver() {
    // scipy.optimize.curve_fit on the same ten points
    let rows = parse_fractions(SHIPPED_FRACTIONS).unwrap();
    let fit = fit_decay(&as_percent_points(&rows)).unwrap();
    assert!((fit.a - 10.667855).abs() < 1e-3, "{fit:?}");
    assert!((fit.b - 0.472209).abs() < 1e-4, "{fit:?}");
    assert!((fit.c - 7.190859).abs() < 1e-3, "{fit:?}");
    assert!((fit.rmse - 1.854513).abs() < 1e-5, "{fit:?}");
    assert!((fit.uncertainties[1] - 0.2583).abs() < 1e-3, "{fit:?}");
    assert_eq!(fit.regimes().steep, Some((1, 6)));
}

#[test]
fn constant_data_is_flagged() {
    let pts: Vec<(f64, f64)> = (0..6).map(|x| (x as f64, 7.0)).collect();
    let fit = fit_decay(&pts).unwrap();
    assert_eq!((fit.a, fit.b, fit.c, fit.b_identifiable), (0.0, 0.0, 7.0, false));
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

proptest! {
    #[test]
    fn noiseless_curves_are_recovered(a in 1.0f64..20.0, b in 0.1f64..2.0, c in 0.0f64..10.0) {
        let pts: Vec<(f64, f64)> = (0..10).map(|x| (x as f64, a * (-b * x as f64).exp() + c)).collect();
        let fit = fit_decay(&pts).unwrap();
        prop_assert!(rel(fit.a, a) < 1e-6, "{:?}", fit);
        prop_assert!(rel(fit.b, b) < 1e-6, "{:?}", fit);
        // relative error on c is meaningless at c = 0
        prop_assert!((fit.c - c).abs() < 1e-6 * c.max(1.0), "{:?}", fit);
        prop_assert!(fit.rmse >= 0.0 && fit.c >= 0.0);
    }

    #[test]
    fn identity_holds_for_any_counts(total in 1u64..10_000, s in 0.0f64..=1.0, z in 0.0f64..=1.0) {
        let successes = (total as f64 * s) as u64;
        let zero_shot = (successes as f64 * z) as u64;
        let st = SuccessStats::<f64>::from_counts(total, successes, zero_shot).unwrap();
        prop_assert!((st.recomposed() - st.p_s).abs() < 1e-12);
        prop_assert!((q_only_success(&st, 1.0, 1.0).unwrap() - st.p_s).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_matches_central_differences() {
    let st = SuccessStats::<f64>::from_counts(295, 235, 42).unwrap();
    let q = |g: f64| q_only_success(&st, g, g).unwrap();
    for g in [1.1, 1.5, 2.0, 3.0, 5.0, 10.0] {
        let h = 1e-5;
        let fd = (q(g + h) - q(g - h)) / (2.0 * h);
        assert!((q_only_sensitivity(&st, g).unwrap() - fd).abs() < 1e-6, "gamma {g}");
    }
    // negative on (1, 100]
    for i in 1..=990 {
        let g = 1.0 + i as f64 * 0.1;
        assert!(q_only_sensitivity(&st, g).unwrap() < 0.0);
    }
    let near_one = q_only_sensitivity(&st, 1.0 + 1e-9).unwrap();
    assert!((near_one - -0.6880).abs() < 5e-4, "{near_one}");
}

#[test]
fn ablation_values() {
    let st = SuccessStats::<f64>::from_counts(295, 235, 42).unwrap();
    for (g, want) in [(1.0, 0.7966), (1.5, 0.56), (2.0, 0.43)] {
        let got = q_only_success(&st, g, g).unwrap();
        assert!((got - want).abs() < 0.01, "gamma {g}: {got}");
    }
    assert!(q_only_success(&st, 0.9, 1.0).is_err());
    assert!(q_only_sensitivity(&st, 1.0).is_err());
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Two tight clusters around orthogonal directions.
fn two_clusters(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut label = Vec::new();
    for i in 0..n {
        let k = i % 2;
        let v: Vec<f64> = (0..dim)
            .map(|d| if d == k { 1.0 } else { 0.0 } + rng.gen_range(-0.05..0.05))
            .collect();
        data.push(unit(v));
        label.push(k);
    }
    (data, label)
}

#[test]
fn som_two_clusters() {
    let (data, label) = two_clusters(200, 3, 7);
    let cfg = SomConfig { iterations: 2000, ..SomConfig::default() };
    let som = train_som(&data, &cfg).unwrap();
    assert_eq!(som.grid.len(), 100);
    assert_eq!(som.hit_counts.iter().sum::<u64>(), 200);
    assert!(som.topological_error < 0.1, "TE {}", som.topological_error);
    // no neuron wins samples from both clusters
    let bmu = |x: &Vec<f64>| {
        som.weights
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let d = |w: &Vec<f64>| w.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                d(a.1).total_cmp(&d(b.1))
            })
            .unwrap()
            .0
    };
    let mut owner = vec![None; 100];
    for (x, k) in data.iter().zip(&label) {
        let b = bmu(x);
        assert!(owner[b].is_none_or(|o| o == *k), "neuron {b} shared");
        owner[b] = Some(*k);
    }
}

#[test]
fn som_quantization_error_does_not_grow() {
    let (data, _) = two_clusters(500, 8, 11);
    let cfg = SomConfig { iterations: 5000, ..SomConfig::default() };
    let (som, qe) = train_som_with_checkpoints(&data, &cfg, &[500, 2500, 5000]).unwrap();
    assert_eq!(qe.len(), 3);
    assert!(qe[1] <= qe[0] + 1e-9 && qe[2] <= qe[1] + 1e-9, "{qe:?}");
    assert!((0.0..=1.0).contains(&som.topological_error));
}

#[test]
fn som_single_point_fixed() {
    let x = unit(vec![0.3, -0.2, 0.9]);
    let cfg = SomConfig { iterations: 3000, batch_size: 10, ..SomConfig::default() };
    let som = train_som(&vec![x.clone(); 5], &cfg).unwrap();
    assert!(som.quantization_error < 1e-3);
    let worst = som
        .weights
        .iter()
        .map(|w| w.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn scenario_suite_feeds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RunStore::new(dir.path().join("runs")));
    let graph = Arc::new(KnowledgeGraph::shipped());
    let hierarchy = ModelHierarchy::scripted_default();
    let scenarios = shipped_scenarios();
    for sc in &scenarios {
        let backends = scripted_backends(graph.clone(), sc.fault_script());
        let mut opts = RunOptions::new(RoleModels::scripted());
        opts.workdir = Some(store.work_dir(&opts.workflow_id));
        opts.observers.push(store.clone());
        run_workflow(&sc.prompt, &hierarchy, &backends, opts).unwrap();
    }
    let (docs, skipped) = store.load_all_results().unwrap();
    assert_eq!((docs.len(), skipped), (scenarios.len(), 0));
    let raw: Vec<_> = docs.iter().map(|d| serde_json::to_value(d).unwrap()).collect();
    let summary = aggregate_logs(&raw).unwrap();
    let want_success = scenarios.iter().filter(|s| s.expect.status == genius_core::aeh::RunStatus::Success).count();
    assert_eq!(summary.stats.successes as usize, want_success);
    assert_eq!(summary.histogram.keys().copied().collect::<Vec<_>>(), (0..=8).collect::<Vec<u32>>());

    let points: Vec<(f64, f64)> = summary.success_fractions().iter().map(|&(x, f)| (x as f64, 100.0 * f)).collect();
    let fit = fit_decay(&points).unwrap();
    let decay = DecayReport::new(points, fit);
    let out = dir.path().join("reports");
    let files = emit_reports(ReportInputs { decay: Some(&decay), logs: Some(&summary), som: None }, &out).unwrap();
    assert_eq!(files.len(), 4);
}
