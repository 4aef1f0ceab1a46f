mod support;

use ite_conformal::linalg::Design;
use ite_conformal::nuisance::{fit_lasso, fit_lasso_traced, lasso_lambda_max, soft_threshold};
use ite_conformal::quantile::{fit_pinball, pinball_lambda_max, pinball_objective};
use ite_conformal::util::empirical_quantile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::*;

#[test]
fn lasso_satisfies_kkt_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.random_range(20..120);
        let p = rng.random_range(1..15);
        let (x, y) = random_problem(&mut rng, n, p);
        let lambda = lasso_lambda_max(&x, &y).unwrap() * rng.random_range(0.01..1.2);
        let m = fit_lasso(&x, &y, lambda).unwrap();
        let v = lasso_kkt_violation(&x, &y, &m, lambda);
        assert!(v < 1e-5, "case {case}: KKT violation {v}");
    }
}

#[test]
fn lasso_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (x, y) = random_problem(&mut rng, 80, 12);
        let lambda = lasso_lambda_max(&x, &y).unwrap() * 0.05;
        let fit = fit_lasso_traced(&x, &y, lambda).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn lasso_above_lambda_max_has_zero_slopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, y) = random_problem(&mut rng, 60, 8);
    let lmax = lasso_lambda_max(&x, &y).unwrap();
    let m = fit_lasso(&x, &y, lmax * 1.0001).unwrap();
    assert!(m.coefficients.iter().all(|&b| b == 0.0));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((m.intercept - mean).abs() < 1e-12);
}

#[test]
fn lasso_on_orthonormal_design_soft_thresholds_ols() {
    // centered +-1 Hadamard columns: mean 0, population sd 1, orthogonal
    let h = [
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];
    let mut x = Design::new(3);
    for r in &h {
        x.push_row(r);
    }
    let y = [3.0, -1.0, 2.5, 0.5, 1.0, -2.0, 0.2, 0.7];
    let n = y.len() as f64;
    for lambda in [0.0, 0.1, 0.5, 1.0] {
        let m = fit_lasso(&x, &y, lambda).unwrap();
        for k in 0..3 {
            let ols: f64 = h.iter().zip(&y).map(|(r, yi)| r[k] * yi).sum::<f64>() / n;
            assert!((m.coefficients[k] - soft_threshold(ols, lambda)).abs() < 1e-6);
        }
    }
}

#[test]
fn pinball_intercept_only_matches_candidate_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let n = rng.random_range(2..200);
        let tau = rng.random_range(0.02..0.98);
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let x = Design::from_rows(1, vec![0.0; n]);
        let m = fit_pinball(&x, &y, tau, 0.0).unwrap();
        let got = y.iter().map(|v| pinball(v - m.intercept, tau)).sum::<f64>() / n as f64;
        let best = intercept_only_minimum(&y, tau);
        assert!((got - best) <= 1e-4 * best.abs().max(1e-12), "case {case}: {got} vs {best}");
    }
}

#[test]
fn pinball_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..20 {
        let n = rng.random_range(6..11);
        let p = rng.random_range(1..3);
        let (x, y) = random_problem(&mut rng, n, p);
        let tau = rng.random_range(0.1..0.9);
        let lambda = if case % 2 == 0 { 0.0 } else { rng.random_range(0.01..0.5) };
        let m = fit_pinball(&x, &y, tau, lambda).unwrap();
        let got = penalized_pinball(&x, &y, tau, lambda, m.intercept, &m.coefficients);
        let best = penalized_pinball_minimum(&x, &y, tau, lambda);
        assert!(best.is_finite());
        assert!(got - best <= 1e-4 * best.abs().max(1e-12), "case {case}: {got} vs {best}");
        assert!((got - pinball_objective(&m, &x, &y, tau, lambda)).abs() < 1e-12);
    }
}

#[test]
fn pinball_never_worse_than_constant_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (x, y) = random_problem(&mut rng, 150, 6);
        let tau = rng.random_range(0.05..0.95);
        let lambda = rng.random_range(0.0..0.05);
        let m = fit_pinball(&x, &y, tau, lambda).unwrap();
        let zero = penalized_pinball(&x, &y, tau, lambda, empirical_quantile(&y, tau), &[0.0; 6]);
        assert!(pinball_objective(&m, &x, &y, tau, lambda) <= zero + 1e-9);
    }
}

#[test]
fn huge_penalty_leaves_the_sample_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = random_problem(&mut rng, 101, 4);
    let tau = 0.3;
    let lmax = pinball_lambda_max(&x, &y, tau).unwrap();
    let m = fit_pinball(&x, &y, tau, 10.0 * lmax).unwrap();
    assert!(m.coefficients.iter().all(|b| b.abs() < 1e-7), "{:?}", m.coefficients);
    // n * tau is not an integer here, so the sample quantile is unique
    assert!((m.intercept - empirical_quantile(&y, tau)).abs() < 1e-6);
}

#[test]
fn gaussian_quantile_band_width() {
    use statrs::distribution::{ContinuousCDF, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sd = 1.7;
    let y: Vec<f64> = (0..5000).map(|_| 0.4 + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let x = Design::from_rows(1, vec![0.0; 5000]);
    let lo = fit_pinball(&x, &y, 0.025, 0.0).unwrap().intercept;
    let hi = fit_pinball(&x, &y, 0.975, 0.0).unwrap().intercept;
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
    let expected = 2.0 * z * sd;
    assert!(((hi - lo) / expected - 1.0).abs() < 0.1, "{} vs {expected}", hi - lo);
}

#[test]
fn quantile_pair_covers_its_training_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, y) = random_problem(&mut rng, 1500, 5);
    let alpha = 0.1;
    let lo = fit_pinball(&x, &y, alpha / 2.0, 0.001).unwrap();
    let hi = fit_pinball(&x, &y, 1.0 - alpha / 2.0, 0.001).unwrap();
    use ite_conformal::nuisance::Regressor;
    let inside = x
        .rows()
        .zip(&y)
        .filter(|(r, v)| lo.predict(r) <= **v && **v <= hi.predict(r))
        .count() as f64
        / y.len() as f64;
    assert!(inside >= 1.0 - alpha - 0.05, "{inside}");
}
