use ite_conformal::conformal::{WeightConfig, WeightScheme};
use ite_conformal::evaluation::{summarize, Grouping};
use ite_conformal::panel::PanelDataset;
use ite_conformal::pipeline::{fit, load_data, run, ExperimentConfig, IntervalBatch, OutwardTargets, PredictionMode};
use ite_conformal::synthetic::SimConfig;
use ite_conformal::Error;

fn config(n: usize, t: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        simulation: SimConfig { n_individuals: n, n_points: t, n_covariates: 8, ..SimConfig::default() },
        ..ExperimentConfig::default()
    }
}

fn interval_at(batch: &IntervalBatch, i: usize, j: usize) -> (f64, f64) {
    let r = batch.records.iter().find(|r| r.individual == i && r.point == j).expect("cell predicted");
    (r.interval.lower, r.interval.upper)
}

/// Adds a large shift to the outcomes of `ids` at decision point `point`.
fn perturb(data: &PanelDataset, ids: &[usize], point: usize) -> PanelDataset {
    let mut y = data.outcomes().to_vec();
    for &i in ids {
        y[i * data.n_points() + point - 1] += 25.0;
    }
    data.with_outcomes(y).unwrap()
}

#[test]
fn downward_intervals_do_not_see_current_or_future_test_outcomes() {
    let cfg = config(160, 10, 3);
    let data = load_data(&cfg).unwrap();
    let base = run(&data, &cfg).unwrap();
    let test_ids = base.fitted.split.test_ids.clone();
    let t0 = 6;
    let moved = run(&perturb(&data, &test_ids, t0), &cfg).unwrap();
    for &i in &test_ids {
        for j in 1..=t0 {
            assert_eq!(interval_at(&base.batch, i, j), interval_at(&moved.batch, i, j), "({i},{j})");
        }
    }
    // the lags do read the perturbed error afterwards
    let changed = test_ids.iter().any(|&i| interval_at(&base.batch, i, t0 + 1) != interval_at(&moved.batch, i, t0 + 1));
    assert!(changed);
}

#[test]
fn augmented_history_only_enters_after_its_own_point() {
    let mut cfg = config(160, 12, 4);
    cfg.mode = PredictionMode::Outward;
    cfg.train_horizon = Some(5);
    cfg.outward_targets = OutwardTargets::Test;
    cfg.augment_cal_with_test_history = true;
    let data = load_data(&cfg).unwrap();
    let base = run(&data, &cfg).unwrap();
    let test_ids = base.fitted.split.test_ids.clone();
    let t0 = 8;
    let moved = run(&perturb(&data, &test_ids, t0), &cfg).unwrap();
    for &i in &test_ids {
        assert_eq!(interval_at(&base.batch, i, t0), interval_at(&moved.batch, i, t0));
    }
    assert!(base.batch.records.iter().all(|r| r.point > 5));
}

#[test]
fn augmentation_leaves_the_first_target_unchanged() {
    let mut cfg = config(150, 10, 5);
    cfg.mode = PredictionMode::Outward;
    cfg.train_horizon = Some(4);
    let data = load_data(&cfg).unwrap();
    let plain = run(&data, &cfg).unwrap();
    cfg.augment_cal_with_test_history = true;
    let augmented = run(&data, &cfg).unwrap();
    assert_eq!(plain.fitted.split.calibration_ids, augmented.fitted.split.calibration_ids);
    let threshold = |b: &IntervalBatch, j: usize| b.records.iter().find(|r| r.point == j).unwrap().threshold;
    assert_eq!(threshold(&plain.batch, 5), threshold(&augmented.batch, 5));
    assert!(plain.fitted.pool().unwrap().len() < augmented.fitted.pool().unwrap().len());
    // outward calibration targets are the calibration individuals themselves
    for r in &plain.batch.records {
        assert!(plain.fitted.split.calibration_ids.contains(&r.individual));
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = config(120, 8, 9);
    let data = load_data(&cfg).unwrap();
    let a = run(&data, &cfg).unwrap();
    let b = run(&load_data(&cfg).unwrap(), &cfg).unwrap();
    assert_eq!(a.batch, b.batch);
}

#[test]
fn median_interval_covers_about_half() {
    let mut cfg = config(600, 20, 2);
    cfg.alpha = 0.5;
    cfg.weights = WeightConfig { scheme: WeightScheme::Equal, ..WeightConfig::default() };
    let out = run(&load_data(&cfg).unwrap(), &cfg).unwrap();
    let overall = &summarize(&out.batch, Grouping::Overall)[0];
    assert!((overall.cov_pseudo - 50.0).abs() < 3.0, "{}", overall.cov_pseudo);
}

#[test]
fn default_run_covers_pseudo_and_true_effects() {
    let cfg = config(400, 12, 1);
    let out = run(&load_data(&cfg).unwrap(), &cfg).unwrap();
    let overall = &summarize(&out.batch, Grouping::Overall)[0];
    assert!(overall.cov_pseudo > 92.0, "{}", overall.cov_pseudo);
    assert!(overall.cov_true.unwrap() >= overall.cov_pseudo);
    assert_eq!(overall.n_cells, out.fitted.split.test_ids.len() * 12);
}

#[test]
fn csv_panel_without_potential_outcomes_runs() {
    let cfg = config(100, 6, 7);
    let data = load_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    data.write_csv(&path).unwrap();
    let mut real = cfg.clone();
    real.data.path = Some(path);
    let loaded = load_data(&real).unwrap();
    assert!(!loaded.has_potential_outcomes());
    let out = run(&loaded, &real).unwrap();
    assert!(out.batch.records.iter().all(|r| r.true_ite.is_none()));
    let rows = summarize(&out.batch, Grouping::DecisionPoint);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.cov_true.is_none()));
    // same split and same pseudo-outcomes as the simulated original
    let sim = run(&data, &cfg).unwrap();
    assert_eq!(sim.batch.records.len(), out.batch.records.len());
    for (a, b) in sim.batch.records.iter().zip(&out.batch.records) {
        assert_eq!(a.pseudo_outcome, b.pseudo_outcome);
        assert_eq!(a.interval, b.interval);
    }
}

#[test]
fn failures_name_their_stage() {
    let mut cfg = config(30, 4, 1);
    cfg.train_count = Some(50);
    let data = load_data(&cfg).unwrap();
    match fit(&data, &cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "split"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn outward_horizon_must_leave_targets() {
    let mut cfg = config(60, 5, 1);
    cfg.mode = PredictionMode::Outward;
    cfg.train_horizon = Some(5);
    let data = load_data(&cfg).unwrap();
    let err = fit(&data, &cfg).unwrap_err();
    assert!(err.to_string().contains("train_horizon"), "{err}");
}
