use std::fs;

use laau_bench::config::{Algorithm, ExperimentConfig};
use laau_bench::dataset::{
    generate_dataset, parse_trace, read_dataset, write_dataset, ContextSource, DatasetSpec,
};
use laau_bench::error::BenchError;
use laau_bench::experiment::{evaluate, prepare, run_experiment, train_laau};
use laau_bench::grad_check::{grad_check, GradCheckConfig};
use laau_bench::ood::{apply_ood, calibrate_noise, wasserstein_1d, OodSpec};
use laau_core::Episode;

fn trace(rows: usize) -> String {
    let mut s = String::from("episode_id,t,c\n");
    for t in 0..rows {
        s.push_str(&format!("w0,{},{}\n", t + 1, 0.5 + (t % 7) as f64 * 0.25));
    }
    s
}

fn spec20() -> DatasetSpec {
    DatasetSpec { horizon: 20, ..DatasetSpec::default() }
}

#[test]
fn forty_row_trace_gives_two_episodes() {
    let (eps, warnings) = parse_trace(&trace(40), &spec20()).unwrap();
    assert_eq!(eps.len(), 2);
    assert!(warnings.is_empty());
    assert!(eps.iter().all(|e| e.horizon() == 20));
}

#[test]
fn forty_one_row_trace_drops_one_row_with_warning() {
    let (eps, warnings) = parse_trace(&trace(41), &spec20()).unwrap();
    assert_eq!(eps.len(), 2);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains('1'), "{}", warnings[0]);
}

#[test]
fn negative_context_is_rejected_with_line_number() {
    let mut text = trace(40);
    text = text.replacen("w0,5,1.5", "w0,5,-1.5", 1);
    match parse_trace(&text, &spec20()) {
        Err(BenchError::Trace { line, .. }) => assert_eq!(line, 6),
        other => panic!("expected a trace error, got {other:?}"),
    }
}

#[test]
fn short_trace_is_a_length_error() {
    assert!(matches!(parse_trace(&trace(10), &spec20()), Err(BenchError::TraceLength(_))));
}

#[test]
fn trace_budgets_follow_the_law() {
    let (eps, _) = parse_trace(&trace(400), &spec20()).unwrap();
    for e in &eps {
        assert!((200.0..=300.0).contains(&e.budgets[0]));
    }
}

#[test]
fn budgets_lie_in_range_for_n20() {
    let data = generate_dataset(&spec20()).unwrap();
    for e in data.train.iter().chain(&data.val).chain(&data.test) {
        assert!((200.0..=300.0).contains(&e.budgets[0]), "{}", e.budgets[0]);
        assert!(e.contexts.iter().all(|c| c[0] >= 0.0));
    }
}

#[test]
fn budget_mean_matches_law() {
    let spec = DatasetSpec { horizon: 20, train: 10_000, val: 1, test: 1, seed: 3, ..DatasetSpec::default() };
    let data = generate_dataset(&spec).unwrap();
    let mean = data.train.iter().map(|e| e.budgets[0]).sum::<f64>() / data.train.len() as f64;
    assert!((mean / (12.5 * 20.0) - 1.0).abs() <= 0.01, "mean {mean}");
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = DatasetSpec { train: 30, val: 5, test: 7, seed: 11, ..DatasetSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &generate_dataset(&spec).unwrap()).unwrap();
    write_dataset(b.path(), &generate_dataset(&spec).unwrap()).unwrap();
    for f in ["train.json", "val.json", "test.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back.train, generate_dataset(&spec).unwrap().train);
}

#[test]
fn seeds_change_the_sample() {
    let a = generate_dataset(&DatasetSpec { seed: 1, ..DatasetSpec::default() }).unwrap();
    let b = generate_dataset(&DatasetSpec { seed: 2, ..DatasetSpec::default() }).unwrap();
    assert_ne!(a.train[0], b.train[0]);
}

fn small_set() -> Vec<Episode> {
    generate_dataset(&DatasetSpec { train: 50, val: 1, test: 1, ..DatasetSpec::default() }).unwrap().train
}

#[test]
fn zero_noise_leaves_set_unchanged() {
    let set = small_set();
    let (out, dw) = apply_ood(&set, &OodSpec { mean: 0.0, sigma: 0.0, seed: 1 }).unwrap();
    assert_eq!(out, set);
    assert_eq!(dw, 0.0);
}

#[test]
fn constant_shift_gives_shift_distance() {
    let set = small_set();
    let (out, dw) = apply_ood(&set, &OodSpec { mean: 0.3, sigma: 0.0, seed: 1 }).unwrap();
    assert!((dw - 0.3).abs() < 1e-12, "{dw}");
    assert!(out.iter().all(|e| e.contexts.iter().all(|c| c[0] >= 0.3)));
}

#[test]
fn wasserstein_is_symmetric() {
    let a = [0.1, 2.0, 0.4, 3.3];
    let b = [1.0, 0.2, 0.0, 5.0, 2.5];
    assert_eq!(wasserstein_1d(&a, &b), wasserstein_1d(&b, &a));
}

#[test]
fn ood_distance_monotone_in_noise() {
    for seed in 0..3 {
        let spec = DatasetSpec {
            train: 200,
            val: 1,
            test: 1,
            seed,
            source: ContextSource::Lognormal { mean: 1.0, sigma: 0.1 },
            ..DatasetSpec::default()
        };
        let set = generate_dataset(&spec).unwrap().train;
        let d: Vec<f64> = [0.05, 0.1, 0.2]
            .iter()
            .map(|&s| apply_ood(&set, &OodSpec { mean: 0.0, sigma: s, seed: 100 + seed }).unwrap().1)
            .collect();
        assert!(d[0] > 0.0 && d[0] < d[1] && d[1] < d[2], "{d:?}");
    }
}

#[test]
fn noise_calibration_hits_target() {
    let set = small_set();
    for target in [0.05, 0.1, 0.2] {
        let (_, _, dw) = calibrate_noise(&set, target, 5).unwrap();
        assert!((dw - target).abs() <= 1e-3 * target, "{dw} vs {target}");
    }
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSpec { horizon: 10, train: 40, val: 10, test: 30, ..DatasetSpec::default() };
    cfg.training.schedule = vec![(3, 5e-3)];
    cfg
}

#[test]
fn opt_dominates_every_algorithm() {
    let (report, _, _) = run_experiment(&tiny_config()).unwrap();
    let opt = report.algorithm("opt").unwrap().mean_utility;
    for a in &report.algorithms {
        assert!(a.mean_utility <= opt + 1e-9, "{} {} > opt {opt}", a.name, a.mean_utility);
        assert!(a.mean_utility.is_finite());
    }
    assert_eq!(report.total_violations(), 0);
    assert_eq!(report.algorithms.len(), Algorithm::ALL.len());
}

#[test]
fn report_json_is_deterministic_modulo_timing() {
    let a = run_experiment(&tiny_config()).unwrap().0;
    let b = run_experiment(&tiny_config()).unwrap().0;
    assert_eq!(a.to_json_without_timing(), b.to_json_without_timing());
    assert_eq!(a.episodes_csv(), b.episodes_csv());
}

#[test]
fn report_has_documented_shape() {
    let report = run_experiment(&tiny_config()).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path(), "r").unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(v["meta"].is_object());
    for a in v["algorithms"].as_array().unwrap() {
        for key in ["name", "mean_utility", "quartiles", "remaining_budget_frac", "violations", "wall_ms"] {
            assert!(a.get(key).is_some(), "missing {key}");
        }
    }
    let csv = fs::read_to_string(dir.path().join("r_episodes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30 * Algorithm::ALL.len());
}

#[test]
fn desk_scale_training_reduces_loss() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec { horizon: 10, ..DatasetSpec::default() },
        ..ExperimentConfig::default()
    };
    let problem = cfg.family.build().unwrap();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let (_, log) = train_laau(&cfg, &problem, &data).unwrap();
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last <= first - 0.1 * first.abs(), "epoch 0 {first}, final {last}");
}

#[test]
fn direct_policy_beats_equal_after_training() {
    let mut cfg = tiny_config();
    cfg.dataset.train = 200;
    cfg.training.schedule = vec![(20, 5e-3)];
    cfg.algorithms = vec![Algorithm::Equal, Algorithm::Direct];
    let problem = cfg.family.build().unwrap();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let prepared = prepare(&cfg, &problem, &data, None).unwrap();
    let report = evaluate(&cfg, &problem, &prepared, &data.test).unwrap();
    assert!(report.algorithm("direct").unwrap().mean_utility > report.algorithm("equal").unwrap().mean_utility);
}

#[test]
fn grad_check_default_suites_pass() {
    let r = grad_check(&GradCheckConfig { layer_instances: 40, pipeline_episodes: 5, ..GradCheckConfig::default() });
    assert!(r.layer_pass && r.pipeline_pass, "{r:?}");
    assert!(r.layer.max_rel() <= 1e-4);
    assert!(r.pipeline.max_rel <= 1e-3);
}

#[test]
fn literal_recurrence_fails_on_budget_active_episodes() {
    let r = grad_check(&GradCheckConfig {
        layer_instances: 1,
        pipeline_episodes: 5,
        lambda_path_only: true,
        budget_active: true,
        ..GradCheckConfig::default()
    });
    assert!(r.pipeline.max_rel > 1e-3, "{}", r.pipeline.max_rel);
    assert!(!r.pipeline_pass);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(ExperimentConfig::from_json(r#"{"nonsense": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"dataset": {"horizon": 1}}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"algorithms": []}"#).is_err());
    let cfg = ExperimentConfig::from_json(r#"{"dataset": {"horizon": 10}, "algorithms": ["laau", "opt"]}"#).unwrap();
    assert_eq!(cfg.dataset.horizon, 10);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}
