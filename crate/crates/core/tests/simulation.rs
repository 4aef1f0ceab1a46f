use ite_conformal::nuisance::{estimate_nuisance, LambdaSpec, OutcomeModel};
use ite_conformal::panel::{split, PanelDataset, TrainSize};
use ite_conformal::pseudo::{dr_transform, ipw_transform};
use ite_conformal::synthetic::{generate, SimConfig};

fn small(n: usize, t: usize, p: usize, seed: u64) -> SimConfig {
    SimConfig { n_individuals: n, n_points: t, n_covariates: p, seed, ..SimConfig::default() }
}

fn cells(data: &PanelDataset) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..data.n_individuals()).flat_map(move |i| (1..=data.n_points()).map(move |j| (i, j)))
}

#[test]
fn observed_outcome_is_the_realized_potential_outcome() {
    let data = generate(&small(50, 20, 5, 3)).unwrap();
    for (i, j) in cells(&data) {
        let a = data.action(i, j);
        assert_eq!(data.outcome(i, j), data.potential_outcome(i, j, a).unwrap());
        let ite = data.potential_outcome(i, j, 1).unwrap() - data.potential_outcome(i, j, 0).unwrap();
        assert_eq!(data.true_ite(i, j).unwrap(), ite);
    }
}

#[test]
fn noiseless_effect_follows_the_linear_form() {
    let mut cfg = small(40, 30, 4, 8);
    cfg.sigma_y = 1e-12;
    cfg.changepoint = Some(15);
    let data = generate(&cfg).unwrap();
    for (i, j) in cells(&data) {
        let x = data.covariates(i, j);
        let theta4 = if j > 15 { &cfg.theta4_post } else { &cfg.theta4 };
        let expected = cfg.theta3 + theta4.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        assert!((data.true_ite(i, j).unwrap() - expected).abs() < 1e-9, "({i},{j})");
    }
}

#[test]
fn changepoint_reverses_the_average_effect() {
    let mut cfg = small(400, 40, 3, 2);
    cfg.changepoint = Some(20);
    let data = generate(&cfg).unwrap();
    let mean = |range: std::ops::RangeInclusive<usize>| {
        let vals: Vec<f64> = (0..400).flat_map(|i| range.clone().map(move |j| (i, j))).map(|(i, j)| data.true_ite(i, j).unwrap()).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    assert!(mean(1..=20) > 1.0);
    assert!(mean(21..=40) < -1.0);
}

#[test]
fn generation_is_reproducible_and_thread_independent() {
    let cfg = small(64, 10, 6, 11);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| generate(&cfg).unwrap());
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| generate(&cfg).unwrap());
    assert_eq!(one.outcomes(), four.outcomes());
    for (i, j) in cells(&one) {
        assert_eq!(one.covariates(i, j), four.covariates(i, j));
        assert_eq!(one.propensity(i, j), four.propensity(i, j));
    }
    let other = generate(&SimConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(one.outcomes(), other.outcomes());
}

#[test]
fn action_rate_tracks_mean_propensity() {
    let data = generate(&small(1000, 20, 5, 5)).unwrap();
    let (mut acts, mut pis, mut var) = (0.0, 0.0, 0.0);
    for (i, j) in cells(&data) {
        let p = data.propensity(i, j);
        acts += f64::from(data.action(i, j));
        pis += p;
        var += p * (1.0 - p);
    }
    assert!((acts - pis).abs() < 3.0 * var.sqrt(), "{acts} vs {pis}");
    for (i, j) in cells(&data) {
        let p = data.propensity(i, j);
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn independent_covariate_setting_gives_uniform_marginals() {
    let mut cfg = small(2000, 5, 3, 9);
    cfg.rho = 0.0;
    cfg.gamma = 0.0;
    cfg.gamma0 = 0.0;
    cfg.cov_noise_var1 = 1.0;
    cfg.cov_noise_var2 = 0.0;
    let data = generate(&cfg).unwrap();
    let values: Vec<f64> = cells(&data).flat_map(|(i, j)| data.covariates(i, j).to_vec()).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n).sqrt(), "{mean}");
    assert!((var - 1.0 / 12.0).abs() < 0.003, "{var}");
    // decile counts of a uniform sample
    let mut bins = [0usize; 10];
    for v in &values {
        bins[((v * 10.0) as usize).min(9)] += 1;
    }
    let chi2: f64 = bins.iter().map(|&b| (b as f64 - n / 10.0).powi(2) / (n / 10.0)).sum();
    assert!(chi2 < 27.9, "chi2 {chi2}"); // 0.999 quantile with 9 df
}

#[test]
fn ipw_pseudo_outcome_is_unbiased_for_the_effect() {
    let data = generate(&small(2000, 10, 5, 4)).unwrap();
    let diffs: Vec<f64> = cells(&data)
        .map(|(i, j)| ipw_transform(data.outcome(i, j), data.action(i, j), data.propensity(i, j)).unwrap() - data.true_ite(i, j).unwrap())
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * sd / n.sqrt(), "mean {mean} se {}", sd / n.sqrt());
}

#[test]
fn dr_with_true_means_recovers_the_effect() {
    let data = generate(&small(100, 10, 5, 6)).unwrap();
    for (i, j) in cells(&data) {
        let (y0, y1) = (data.potential_outcome(i, j, 0).unwrap(), data.potential_outcome(i, j, 1).unwrap());
        let dr = dr_transform(data.outcome(i, j), data.action(i, j), data.propensity(i, j), y0, y1).unwrap();
        assert!((dr - data.true_ite(i, j).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn nuisance_contrast_recovers_a_constant_effect() {
    let mut cfg = small(1500, 20, 10, 7);
    cfg.theta4 = vec![];
    let data = generate(&cfg).unwrap();
    let s = split(&data, TrainSize::Fraction(0.75), 7, None).unwrap();
    let est = estimate_nuisance(&data, &s, LambdaSpec::default(), 7).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for &i in &s.test_ids {
        for j in 1..=data.n_points() {
            total += est.mu(&data, i, j, 1) - est.mu(&data, i, j, 0);
            n += 1.0;
        }
    }
    let contrast = total / n;
    assert!((contrast - cfg.theta3).abs() < 0.1, "{contrast}");
}

#[test]
fn nuisance_fit_only_reads_its_own_individuals() {
    let data = generate(&small(120, 8, 4, 1)).unwrap();
    let s = split(&data, TrainSize::Fraction(0.75), 1, None).unwrap();
    let mut scrambled = data.outcomes().to_vec();
    for i in 0..data.n_individuals() {
        if !s.nuisance_ids.contains(&i) {
            for j in 0..data.n_points() {
                scrambled[i * data.n_points() + j] += 100.0 * (j as f64 + 1.0);
            }
        }
    }
    let other = data.with_outcomes(scrambled).unwrap();
    let a = estimate_nuisance(&data, &s, LambdaSpec::default(), 1).unwrap();
    let b = estimate_nuisance(&other, &s, LambdaSpec::default(), 1).unwrap();
    for &i in &s.test_ids {
        for j in 1..=data.n_points() {
            assert_eq!(a.mu(&data, i, j, 1), b.mu(&data, i, j, 1));
        }
    }
}
