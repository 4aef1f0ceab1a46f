//! Independent reference implementations used by the test suites.
#![allow(dead_code)]

use ite_conformal::linalg::Design;
use ite_conformal::nuisance::LinearModel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Population mean and standard deviation of every column.
pub fn column_moments(x: &Design) -> (Vec<f64>, Vec<f64>) {
    let n = x.n_rows() as f64;
    let p = x.n_cols();
    let mut means = vec![0.0; p];
    for r in x.rows() {
        for k in 0..p {
            means[k] += r[k] / n;
        }
    }
    let mut sds = vec![0.0; p];
    for r in x.rows() {
        for k in 0..p {
            sds[k] += (r[k] - means[k]).powi(2) / n;
        }
    }
    (means, sds.into_iter().map(f64::sqrt).collect())
}

fn predict(m: &LinearModel, row: &[f64]) -> f64 {
    m.intercept + m.coefficients.iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
}

/// Largest violation of the lasso optimality conditions on the standardized
/// scale: `|g_p| <= lambda` at zero, `g_p = lambda * sign(b_p)` otherwise,
/// plus a zero mean residual for the intercept.
pub fn lasso_kkt_violation(x: &Design, y: &[f64], m: &LinearModel, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let (means, sds) = column_moments(x);
    let resid: Vec<f64> = x.rows().zip(y).map(|(r, yi)| yi - predict(m, r)).collect();
    let mut worst = (resid.iter().sum::<f64>() / n).abs();
    for k in 0..x.n_cols() {
        if sds[k] <= 1e-12 * (1.0 + means[k].abs()) {
            continue;
        }
        let g: f64 = x.rows().zip(&resid).map(|(r, e)| (r[k] - means[k]) / sds[k] * e).sum::<f64>() / n;
        let b = m.coefficients[k] * sds[k];
        let v = if b == 0.0 { (g.abs() - lambda).max(0.0) } else { (g - lambda * b.signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

pub fn pinball(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// `(1/n) sum rho_tau(y - a - x'b) + lambda * sum sd_p |b_p|`
pub fn penalized_pinball(x: &Design, y: &[f64], tau: f64, lambda: f64, intercept: f64, slopes: &[f64]) -> f64 {
    let (_, sds) = column_moments(x);
    let loss: f64 = x
        .rows()
        .zip(y)
        .map(|(r, yi)| pinball(yi - intercept - slopes.iter().zip(r).map(|(b, v)| b * v).sum::<f64>(), tau))
        .sum();
    loss / y.len() as f64 + lambda * slopes.iter().zip(&sds).map(|(b, s)| (b * s).abs()).sum::<f64>()
}

/// Minimum of the intercept-only pinball objective by scanning every sample
/// value (an optimum always sits on one).
pub fn intercept_only_minimum(y: &[f64], tau: f64) -> f64 {
    y.iter()
        .map(|&q| y.iter().map(|&v| pinball(v - q, tau)).sum::<f64>() / y.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

fn combinations(n: usize, k: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if current.len() == k {
        out.push(current.clone());
        return;
    }
    for i in start..n {
        current.push(i);
        combinations(n, k, i + 1, current, out);
        current.pop();
    }
}

/// Exact minimum of the penalized pinball objective by vertex enumeration.
///
/// The objective is piecewise linear with kinks on the hyperplanes
/// `y_i = a + x_i'b` and `b_p = 0`; an optimum is attained where `1 + P` of
/// them intersect, so every such intersection is evaluated.
pub fn penalized_pinball_minimum(x: &Design, y: &[f64], tau: f64, lambda: f64) -> f64 {
    let n = y.len();
    let p = x.n_cols();
    let dim = p + 1;
    let mut rows: Vec<(Vec<f64>, f64)> = x
        .rows()
        .zip(y)
        .map(|(r, &yi)| {
            let mut row = vec![1.0];
            row.extend_from_slice(r);
            (row, yi)
        })
        .collect();
    for k in 0..p {
        let mut row = vec![0.0; dim];
        row[k + 1] = 1.0;
        rows.push((row, 0.0));
    }
    let mut subsets = Vec::new();
    combinations(n + p, dim, 0, &mut Vec::new(), &mut subsets);
    let mut best = f64::INFINITY;
    for s in subsets {
        let a = DMatrix::from_fn(dim, dim, |r, c| rows[s[r]].0[c]);
        let b = DVector::from_iterator(dim, s.iter().map(|&r| rows[r].1));
        let lu = a.lu();
        if lu.determinant().abs() < 1e-10 {
            continue;
        }
        if let Some(sol) = lu.solve(&b) {
            let val = penalized_pinball(x, y, tau, lambda, sol[0], &sol.as_slice()[1..]);
            best = best.min(val);
        }
    }
    best
}

/// Smallest score whose cumulative weight reaches `level`, scanning the
/// distinct candidates directly; `+inf` if none does.
pub fn brute_weighted_quantile(scores: &[f64], weights: &[f64], level: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &v in scores {
        let mass: f64 = scores.iter().zip(weights).filter(|(s, _)| **s <= v).map(|(_, w)| w).sum();
        if mass >= level - 1e-12 && v < best {
            best = v;
        }
    }
    best
}

/// The classical split-conformal threshold: the `ceil((1 - alpha)(n + 1))`-th
/// smallest score, or `+inf` when that index exceeds `n`. `alpha` is given as
/// `alpha_pct / 100` so the ceiling is computed in exact integers.
pub fn classical_conformal_threshold(scores: &[f64], alpha_pct: u64) -> f64 {
    let n = scores.len() as u64;
    let k = ((100 - alpha_pct) * (n + 1)).div_ceil(100);
    if k > n {
        return f64::INFINITY;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s[(k - 1) as usize]
}

/// Sparse Gaussian regression problem with unevenly scaled columns.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Design, Vec<f64>) {
    let mut x = Design::new(p);
    let beta: Vec<f64> = (0..p).map(|k| if k % 3 == 0 { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) * rng.random_range(0.5..3.0)).collect();
        y.push(row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + rng.sample::<f64, _>(StandardNormal));
        x.push_row(&row);
    }
    (x, y)
}
