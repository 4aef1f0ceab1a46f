//! Penalized linear quantile regression and the lower/upper quantile pair.
//!
//! The pinball problem is solved as a linear program with a Frisch-Newton
//! primal-dual interior point method (Mehrotra predictor-corrector). The L1
//! penalty enters as pseudo-observations: a row `+-n*lambda*e_p` with response
//! 0 contributes `rho_tau(u) + rho_tau(-u) = |u|` times its scale, so penalized
//! and unpenalized fits share one solver.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, factor_spd, Design, Standardizer};
use crate::nuisance::{assign_folds, LambdaSpec, LinearModel, OutcomeModel, Regressor};
use crate::panel::PanelDataset;

/// `rho_tau(u) = u (tau - 1{u < 0})`
#[inline]
pub fn pinball_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Interior-point controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop once the duality gap is below `tolerance * (1 + objective)`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PinballFit {
    pub model: LinearModel,
    pub iterations: usize,
    /// Final duality gap on the `n`-scaled objective.
    pub gap: f64,
}

const ROW_CHUNK: usize = 4096;
const STEP_DAMPING: f64 = 0.99995;

/// Deterministic chunked reduction: chunk partial sums are added in order.
fn reduce_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            f(c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in chunks {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Largest feasible step along `d` keeping `v + step * d > 0`.
fn max_step(v: &[f64], d: &[f64]) -> f64 {
    v.iter()
        .zip(d)
        .filter(|(_, &di)| di < 0.0)
        .map(|(&vi, &di)| -vi / di)
        .fold(1e20, f64::min)
}

/// `sum_i q_i a_i a_i'` as a symmetric matrix.
fn weighted_gram(rows: &[f64], p: usize, q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let upper = reduce_rows(n, p * p, |range, acc| {
        for i in range {
            let row = &rows[i * p..(i + 1) * p];
            let qi = q[i];
            for a in 0..p {
                let v = qi * row[a];
                if v == 0.0 {
                    continue;
                }
                let out = &mut acc[a * p + a..a * p + p];
                for (o, rb) in out.iter_mut().zip(&row[a..]) {
                    *o += v * rb;
                }
            }
        }
    });
    DMatrix::from_fn(p, p, |r, c| if r <= c { upper[r * p + c] } else { upper[c * p + r] })
}

/// `sum_i v_i a_i`
fn weighted_row_sum(rows: &[f64], p: usize, v: &[f64]) -> DVector<f64> {
    let sum = reduce_rows(v.len(), p, |range, acc| {
        for i in range {
            let vi = v[i];
            if vi != 0.0 {
                for (o, r) in acc.iter_mut().zip(&rows[i * p..(i + 1) * p]) {
                    *o += vi * r;
                }
            }
        }
    });
    DVector::from_vec(sum)
}

fn row_products(rows: &[f64], p: usize, beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows.len() / p.max(1)];
    out.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(c, chunk)| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = c * ROW_CHUNK + k;
            *o = dot(&rows[i * p..(i + 1) * p], beta);
        }
    });
    out
}

/// Minimizes `sum_i rho_tau(y_i - a_i' beta)` over `beta` for row-major `rows`
/// of width `p`. Returns `(beta, iterations, gap)`.
///
/// Works on the bounded dual `max b'd - 1'w` s.t. `A'd + z - w = -y`, with
/// `A = rows'`, `b = (1 - tau) A 1`, primal `x in [0, 1]`; `beta = -d`.
fn frisch_newton(rows: &[f64], p: usize, y: &[f64], tau: f64, opts: SolverOptions) -> Result<(Vec<f64>, usize, f64)> {
    let n = y.len();
    let c: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut x = vec![1.0 - tau; n];
    let mut s = vec![tau; n];

    let ones = vec![1.0; n];
    let gram = factor_spd(weighted_gram(rows, p, &ones))?;
    let mut d = gram.solve(&weighted_row_sum(rows, p, &c));
    let fitted = row_products(rows, p, d.as_slice());
    let r: Vec<f64> = c.iter().zip(&fitted).map(|(ci, f)| ci - f).collect();
    let offset = 1e-3 * (r.iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1e-8);
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0) + offset).collect();
    let mut w: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + offset).collect();

    let mut dx = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut t = vec![0.0; n];

    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        gap = dot(&z, &x) + dot(&w, &s);
        let beta: Vec<f64> = d.iter().map(|v| -v).collect();
        let fit = row_products(rows, p, &beta);
        let objective: f64 = y.iter().zip(&fit).map(|(yi, f)| pinball_loss(yi - f, tau)).sum();
        if !gap.is_finite() || !objective.is_finite() {
            return Err(Error::Numerical("interior point iterates diverged".into()));
        }
        if gap <= opts.tolerance * (1.0 + objective) {
            break;
        }
        iterations += 1;

        // predictor
        for i in 0..n {
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
            t[i] = z[i] - w[i];
        }
        let qt: Vec<f64> = q.iter().zip(&t).map(|(a, b)| a * b).collect();
        let normal = factor_spd(weighted_gram(rows, p, &q))?;
        let mut dd = normal.solve(&weighted_row_sum(rows, p, &qt));
        let mut ad = row_products(rows, p, dd.as_slice());
        for i in 0..n {
            dx[i] = q[i] * (ad[i] - t[i]);
            ds[i] = -dx[i];
            dz[i] = -z[i] * (1.0 + dx[i] / x[i]);
            dw[i] = -w[i] * (1.0 + ds[i] / s[i]);
        }
        let mut fp = (STEP_DAMPING * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
        let mut fd = (STEP_DAMPING * max_step(&z, &dz).min(max_step(&w, &dw))).min(1.0);

        if fp.min(fd) < 1.0 {
            // corrector with a Mehrotra centering target
            let mu = gap;
            let mut g = 0.0;
            for i in 0..n {
                g += (z[i] + fd * dz[i]) * (x[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i]);
            }
            let target = mu * (g / mu).powi(3) / (2.0 * n as f64);
            for i in 0..n {
                let xi = target * (1.0 / x[i] - 1.0 / s[i]);
                t[i] = (z[i] - w[i]) - xi + dx[i] * dz[i] / x[i] - ds[i] * dw[i] / s[i];
            }
            let qt: Vec<f64> = q.iter().zip(&t).map(|(a, b)| a * b).collect();
            dd = normal.solve(&weighted_row_sum(rows, p, &qt));
            ad = row_products(rows, p, dd.as_slice());
            for i in 0..n {
                let dxdz = dx[i] * dz[i];
                let dsdw = ds[i] * dw[i];
                let step_x = q[i] * (ad[i] - t[i]);
                dz[i] = target / x[i] - z[i] - (dxdz + z[i] * step_x) / x[i];
                dw[i] = target / s[i] - w[i] - (dsdw - w[i] * step_x) / s[i];
                dx[i] = step_x;
                ds[i] = -step_x;
            }
            fp = (STEP_DAMPING * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
            fd = (STEP_DAMPING * max_step(&z, &dz).min(max_step(&w, &dw))).min(1.0);
        }

        for i in 0..n {
            x[i] += fp * dx[i];
            s[i] += fp * ds[i];
            z[i] += fd * dz[i];
            w[i] += fd * dw[i];
        }
        d += dd * fd;
    }
    let beta: Vec<f64> = d.iter().map(|v| -v).collect();
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("interior point produced non-finite coefficients".into()));
    }
    Ok((beta, iterations, gap))
}

fn check_inputs(x: &Design, y: &[f64], tau: f64, lambda: f64) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(Error::Schema(format!("{} rows but {} targets", x.n_rows(), y.len())));
    }
    if x.n_rows() < 2 {
        return Err(Error::Numerical("at least two rows are required to fit a model".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config("tau", format!("{tau} is not in (0,1)")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("{lambda} must be finite and non-negative")));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design or targets contain NaN/inf".into()));
    }
    Ok(())
}

/// L1-penalized linear quantile regression:
/// `min (1/n) sum rho_tau(y - a - x'b) + lambda * sum |b_p| sd_p`.
///
/// The intercept is unpenalized and constant columns get coefficient 0.
pub fn fit_pinball(x: &Design, y: &[f64], tau: f64, lambda: f64) -> Result<LinearModel> {
    Ok(fit_pinball_with(x, y, tau, lambda, SolverOptions::default())?.model)
}

pub fn fit_pinball_with(x: &Design, y: &[f64], tau: f64, lambda: f64, opts: SolverOptions) -> Result<PinballFit> {
    check_inputs(x, y, tau, lambda)?;
    let n = x.n_rows();
    let std = Standardizer::fit(x);
    let active: Vec<usize> = (0..x.n_cols()).filter(|&k| !std.is_constant(k)).collect();
    let width = active.len() + 1;
    let penalty_rows = if lambda > 0.0 { 2 * active.len() } else { 0 };

    let mut rows = Vec::with_capacity((n + penalty_rows) * width);
    for r in x.rows() {
        rows.push(1.0);
        rows.extend(active.iter().map(|&k| (r[k] - std.means[k]) / std.scales[k]));
    }
    let mut targets = y.to_vec();
    if lambda > 0.0 {
        let weight = n as f64 * lambda;
        for k in 0..active.len() {
            for sign in [1.0, -1.0] {
                let start = rows.len();
                rows.resize(start + width, 0.0);
                rows[start + 1 + k] = sign * weight;
                targets.push(0.0);
            }
        }
    }

    let (beta, iterations, gap) = frisch_newton(&rows, width, &targets, tau, opts)?;
    let mut coefficients = vec![0.0; x.n_cols()];
    let mut intercept = beta[0];
    for (slot, &k) in active.iter().enumerate() {
        coefficients[k] = beta[slot + 1] / std.scales[k];
        intercept -= coefficients[k] * std.means[k];
    }
    Ok(PinballFit {
        model: LinearModel { intercept, coefficients },
        iterations,
        gap,
    })
}

/// Penalized objective as minimized by [`fit_pinball`].
pub fn pinball_objective(model: &LinearModel, x: &Design, y: &[f64], tau: f64, lambda: f64) -> f64 {
    let std = Standardizer::fit(x);
    let loss: f64 = x.rows().zip(y).map(|(r, yi)| pinball_loss(yi - model.predict(r), tau)).sum();
    let penalty: f64 = model.coefficients.iter().zip(&std.scales).map(|(b, sd)| (b * sd).abs()).sum();
    loss / y.len() as f64 + lambda * penalty
}

/// Smallest penalty at which every slope is zero (up to subgradient ties):
/// the largest standardized correlation of `tau - 1{y < q_tau}` with a column.
pub fn pinball_lambda_max(x: &Design, y: &[f64], tau: f64) -> Result<f64> {
    check_inputs(x, y, tau, 0.0)?;
    let q = crate::util::empirical_quantile(y, tau);
    let score: Vec<f64> = y.iter().map(|&v| if v < q { tau - 1.0 } else { tau }).collect();
    let std = Standardizer::fit(x);
    let n = y.len() as f64;
    let mut best: f64 = 0.0;
    for k in 0..x.n_cols() {
        if std.is_constant(k) {
            continue;
        }
        let g: f64 = x.rows().zip(&score).map(|(r, s)| (r[k] - std.means[k]) / std.scales[k] * s).sum();
        best = best.max(g.abs() / n);
    }
    Ok(best)
}

/// Penalty selection for the quantile models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileTuning {
    pub lambda: LambdaSpec,
    /// Cross-validation runs on a subsample of whole individuals holding at
    /// most this many rows.
    pub cv_max_rows: usize,
    pub lags: LagSet,
}

impl Default for QuantileTuning {
    fn default() -> Self {
        Self {
            lambda: LambdaSpec::CrossValidated {
                grid_size: 8,
                ratio: 0.3,
                folds: 5,
            },
            cv_max_rows: 3000,
            lags: LagSet::FirstThree,
        }
    }
}

const QR_CV_STREAM: u64 = (1 << 62) + 2;
const CV_OPTIONS: SolverOptions = SolverOptions {
    tolerance: 1e-7,
    max_iterations: 100,
};

/// Quantile regression with the penalty chosen by held-out pinball loss over
/// individual-blocked folds. Returns the model and the chosen penalty.
pub fn fit_pinball_cv(
    x: &Design,
    y: &[f64],
    groups: &[usize],
    tau: f64,
    tuning: &QuantileTuning,
    seed: u64,
) -> Result<(LinearModel, f64)> {
    check_inputs(x, y, tau, 0.0)?;
    tuning.lambda.validate("quantile.lambda")?;
    let (grid_size, ratio, folds) = match tuning.lambda {
        LambdaSpec::Fixed(l) => return Ok((fit_pinball(x, y, tau, l)?, l)),
        LambdaSpec::CrossValidated { grid_size, ratio, folds } => (grid_size, ratio, folds),
    };

    // subsample whole groups in a seeded order until the row budget is met
    let (order, _) = assign_folds(groups, usize::MAX, seed, QR_CV_STREAM);
    let n_groups = order.iter().max().map_or(0, |m| m + 1);
    let mut rows_per_rank = vec![0usize; n_groups];
    for &o in &order {
        rows_per_rank[o] += 1;
    }
    let mut keep_ranks = 0;
    let mut total = 0;
    while keep_ranks < n_groups && (total < tuning.cv_max_rows || keep_ranks < folds) {
        total += rows_per_rank[keep_ranks];
        keep_ranks += 1;
    }
    let sub_rows: Vec<usize> = (0..y.len()).filter(|&r| order[r] < keep_ranks).collect();
    let sub_x = x.select_rows(&sub_rows);
    let sub_y: Vec<f64> = sub_rows.iter().map(|&r| y[r]).collect();
    let sub_groups: Vec<usize> = sub_rows.iter().map(|&r| groups[r]).collect();

    let lambda_max = pinball_lambda_max(&sub_x, &sub_y, tau)?;
    let grid: Vec<f64> = (0..grid_size).map(|k| lambda_max * ratio.powi(k as i32)).collect();
    let (fold_of_row, folds) = assign_folds(&sub_groups, folds, seed, QR_CV_STREAM + 1);

    let best = if folds < 2 || lambda_max == 0.0 {
        grid.len() - 1
    } else {
        let mut loss = vec![0.0; grid.len()];
        for f in 0..folds {
            let train: Vec<usize> = (0..sub_y.len()).filter(|&r| fold_of_row[r] != f).collect();
            let held: Vec<usize> = (0..sub_y.len()).filter(|&r| fold_of_row[r] == f).collect();
            let tx = sub_x.select_rows(&train);
            let ty: Vec<f64> = train.iter().map(|&r| sub_y[r]).collect();
            for (k, &lambda) in grid.iter().enumerate() {
                let model = fit_pinball_with(&tx, &ty, tau, lambda, CV_OPTIONS)?.model;
                loss[k] += held
                    .iter()
                    .map(|&r| pinball_loss(sub_y[r] - model.predict(sub_x.row(r)), tau))
                    .sum::<f64>();
            }
        }
        let mut best = 0;
        for k in 1..grid.len() {
            if loss[k] < loss[best] {
                best = k;
            }
        }
        best
    };
    Ok((fit_pinball(x, y, tau, grid[best])?, grid[best]))
}

/// Which lagged signed errors enter the quantile features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LagSet {
    /// `e_{j-1}, e_{j-2}, e_{j-3}`
    #[default]
    FirstThree,
    /// `e_{j-3}` only
    ThirdOnly,
}

impl LagSet {
    pub fn lags(self) -> &'static [usize] {
        match self {
            LagSet::FirstThree => &[1, 2, 3],
            LagSet::ThirdOnly => &[3],
        }
    }
}

/// Signed outcome-model errors `e_j = Y_ij - mu_{A_ij}(X_ij)` for
/// `j = 1..=last_point`.
pub fn signed_errors(data: &PanelDataset, estimates: &dyn OutcomeModel, i: usize, last_point: usize) -> Vec<f64> {
    (1..=last_point)
        .map(|j| data.outcome(i, j) - estimates.mu(data, i, j, data.action(i, j)))
        .collect()
}

/// Quantile feature row `[X_ij, j, lagged errors]`; lags before the first
/// decision point are 0.
pub fn qr_features(data: &PanelDataset, i: usize, j: usize, errors: &[f64], lags: LagSet) -> Vec<f64> {
    let mut row = Vec::with_capacity(data.n_covariates() + 4);
    row.extend_from_slice(data.covariates(i, j));
    row.push(j as f64);
    for &l in lags.lags() {
        row.push(if j > l { errors[j - l - 1] } else { 0.0 });
    }
    row
}

/// Quantile design for a list of cells grouped by individual.
pub fn qr_design(data: &PanelDataset, cells: &[(usize, usize)], estimates: &dyn OutcomeModel, lags: LagSet) -> Design {
    let width = data.n_covariates() + 1 + lags.lags().len();
    let mut out = Design::with_capacity(width, cells.len());
    let mut last_point: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for &(i, j) in cells {
        let e = last_point.entry(i).or_insert(j);
        *e = (*e).max(j);
    }
    let mut current: Option<(usize, Vec<f64>)> = None;
    for &(i, j) in cells {
        if current.as_ref().is_none_or(|(ci, _)| *ci != i) {
            current = Some((i, signed_errors(data, estimates, i, last_point[&i])));
        }
        let errors = &current.as_ref().unwrap().1;
        out.push_row(&qr_features(data, i, j, errors, lags));
    }
    out
}

/// Lower and upper conditional quantile models of the pseudo-outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModelPair {
    pub lower: LinearModel,
    pub upper: LinearModel,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub lags: LagSet,
}

/// Predicted band at one feature row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileBand {
    pub lower: f64,
    pub upper: f64,
    /// The raw predictions crossed and were replaced by their midpoint.
    pub repaired: bool,
}

impl QuantileModelPair {
    pub fn predict(&self, row: &[f64]) -> QuantileBand {
        let lo = self.lower.predict(row);
        let hi = self.upper.predict(row);
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            QuantileBand {
                lower: mid,
                upper: mid,
                repaired: true,
            }
        } else {
            QuantileBand {
                lower: lo,
                upper: hi,
                repaired: false,
            }
        }
    }
}

/// Fits the `alpha/2` and `1 - alpha/2` quantile models of `targets` on `x`.
pub fn fit_quantile_pair(
    x: &Design,
    targets: &[f64],
    groups: &[usize],
    alpha: f64,
    tuning: &QuantileTuning,
    seed: u64,
) -> Result<QuantileModelPair> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha", format!("{alpha} is not in (0,1)")));
    }
    let tau_lower = alpha / 2.0;
    let tau_upper = 1.0 - alpha / 2.0;
    let (lower, lambda_lower) = fit_pinball_cv(x, targets, groups, tau_lower, tuning, seed)?;
    let (upper, lambda_upper) = fit_pinball_cv(x, targets, groups, tau_upper, tuning, seed)?;
    Ok(QuantileModelPair {
        lower,
        upper,
        tau_lower,
        tau_upper,
        lambda_lower,
        lambda_upper,
        lags: tuning.lags,
    })
}
