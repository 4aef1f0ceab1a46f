//! Outcome-model estimation on the nuisance split.
//!
//! A single L1-penalized linear model is fit over `[X, A_t, A_{t-1}, X * A_t]`
//! and evaluated with `A_t` forced to 0 or 1 to obtain both arm means.
//! The lasso works on sufficient statistics (`X'X`, `X'y`), so each coordinate
//! descent sweep costs `O(P^2)` regardless of the number of rows, and
//! cross-validation folds are obtained by subtracting fold statistics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Design};
use crate::panel::{PanelDataset, TrainingSplit};

/// Fitted predictors usable as nuisance or quantile models. A fitted model is
/// immutable and prediction is deterministic.
pub trait Regressor: Send + Sync {
    fn predict(&self, row: &[f64]) -> f64;
}

/// Arm-specific conditional mean `mu_a` evaluated at a panel cell.
pub trait OutcomeModel: Sync {
    fn mu(&self, data: &PanelDataset, i: usize, j: usize, arm: u8) -> f64;
}

/// Linear predictor on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn constant(value: f64, n_features: usize) -> Self {
        Self {
            intercept: value,
            coefficients: vec![0.0; n_features],
        }
    }
}

impl Regressor for LinearModel {
    #[inline]
    fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + dot(&self.coefficients, row)
    }
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Sufficient statistics of a least-squares problem.
#[derive(Debug, Clone)]
struct GramStats {
    n: f64,
    sum_x: Vec<f64>,
    sum_y: f64,
    sum_yy: f64,
    /// Upper and lower triangles both filled, row-major `p x p`.
    xtx: Vec<f64>,
    xty: Vec<f64>,
}

impl GramStats {
    fn zeros(p: usize) -> Self {
        Self {
            n: 0.0,
            sum_x: vec![0.0; p],
            sum_y: 0.0,
            sum_yy: 0.0,
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
        }
    }

    fn accumulate(&mut self, row: &[f64], y: f64) {
        let p = row.len();
        self.n += 1.0;
        self.sum_y += y;
        self.sum_yy += y * y;
        for a in 0..p {
            let xa = row[a];
            if xa == 0.0 {
                continue;
            }
            self.sum_x[a] += xa;
            self.xty[a] += xa * y;
            let out = &mut self.xtx[a * p + a..a * p + p];
            for (o, xb) in out.iter_mut().zip(&row[a..]) {
                *o += xa * xb;
            }
        }
    }

    fn finish(mut self) -> Self {
        let p = self.sum_x.len();
        for a in 0..p {
            for b in 0..a {
                self.xtx[a * p + b] = self.xtx[b * p + a];
            }
        }
        self
    }

    fn from_rows<'a>(rows: impl Iterator<Item = (&'a [f64], f64)>, p: usize) -> Self {
        let mut s = Self::zeros(p);
        for (row, y) in rows {
            s.accumulate(row, y);
        }
        s.finish()
    }

    fn minus(&self, other: &Self) -> Self {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        Self {
            n: self.n - other.n,
            sum_x: sub(&self.sum_x, &other.sum_x),
            sum_y: self.sum_y - other.sum_y,
            sum_yy: self.sum_yy - other.sum_yy,
            xtx: sub(&self.xtx, &other.xtx),
            xty: sub(&self.xty, &other.xty),
        }
    }

    fn plus(&self, other: &Self) -> Self {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        Self {
            n: self.n + other.n,
            sum_x: add(&self.sum_x, &other.sum_x),
            sum_y: self.sum_y + other.sum_y,
            sum_yy: self.sum_yy + other.sum_yy,
            xtx: add(&self.xtx, &other.xtx),
            xty: add(&self.xty, &other.xty),
        }
    }
}

/// The standardized problem `(1/2n)|y~ - X~ b|^2 + lambda |b|_1` in Gram form.
struct StandardizedProblem {
    p: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
    active: Vec<bool>,
    y_mean: f64,
    /// `X~'y~ / n`
    corr: Vec<f64>,
    /// `X~'X~ / n`
    gram: Vec<f64>,
    /// `y~'y~ / n`
    yy: f64,
}

impl StandardizedProblem {
    fn new(stats: &GramStats) -> Self {
        let p = stats.sum_x.len();
        let n = stats.n;
        let means: Vec<f64> = stats.sum_x.iter().map(|s| s / n).collect();
        let y_mean = stats.sum_y / n;
        let mut scales = vec![0.0; p];
        let mut active = vec![false; p];
        for a in 0..p {
            let var = stats.xtx[a * p + a] / n - means[a] * means[a];
            let sd = var.max(0.0).sqrt();
            scales[a] = sd;
            active[a] = sd > 1e-12 * (1.0 + means[a].abs());
        }
        let mut corr = vec![0.0; p];
        let mut gram = vec![0.0; p * p];
        for a in 0..p {
            if !active[a] {
                continue;
            }
            corr[a] = (stats.xty[a] / n - means[a] * y_mean) / scales[a];
            for b in 0..p {
                if active[b] {
                    gram[a * p + b] =
                        (stats.xtx[a * p + b] / n - means[a] * means[b]) / (scales[a] * scales[b]);
                }
            }
        }
        let yy = (stats.sum_yy / n - y_mean * y_mean).max(0.0);
        Self {
            p,
            means,
            scales,
            active,
            y_mean,
            corr,
            gram,
            yy,
        }
    }

    fn lambda_max(&self) -> f64 {
        self.corr.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    fn objective(&self, b: &[f64], lambda: f64) -> f64 {
        let p = self.p;
        let mut quad = 0.0;
        for a in 0..p {
            if b[a] != 0.0 {
                quad += b[a] * dot(&self.gram[a * p..(a + 1) * p], b);
            }
        }
        0.5 * (self.yy - 2.0 * dot(&self.corr, b) + quad) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Cyclic coordinate descent from `b`, in place.
    fn descend(&self, b: &mut [f64], lambda: f64, trace: Option<&mut Vec<f64>>) -> usize {
        let p = self.p;
        let mut g: Vec<f64> = (0..p).map(|a| dot(&self.gram[a * p..(a + 1) * p], b)).collect();
        let mut trace = trace;
        let mut sweeps = 0;
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for a in 0..p {
                if !self.active[a] {
                    continue;
                }
                let diag = self.gram[a * p + a];
                let partial = self.corr[a] - (g[a] - diag * b[a]);
                let new = soft_threshold(partial, lambda) / diag;
                let delta = new - b[a];
                if delta != 0.0 {
                    b[a] = new;
                    for (gk, col) in g.iter_mut().zip(&self.gram[a * p..(a + 1) * p]) {
                        *gk += col * delta;
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective(b, lambda));
            }
            if max_change < TOLERANCE {
                break;
            }
        }
        sweeps
    }

    fn to_model(&self, b: &[f64]) -> LinearModel {
        let coefficients: Vec<f64> = (0..self.p)
            .map(|a| if self.active[a] { b[a] / self.scales[a] } else { 0.0 })
            .collect();
        let intercept = self.y_mean - dot(&coefficients, &self.means);
        LinearModel { intercept, coefficients }
    }
}

const MAX_SWEEPS: usize = 10_000;
const TOLERANCE: f64 = 1e-7;

/// Result of a traced lasso fit.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub model: LinearModel,
    /// Standardized-scale objective after every sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
}

fn check_inputs(x: &Design, y: &[f64]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(Error::Schema(format!("{} rows but {} targets", x.n_rows(), y.len())));
    }
    if x.n_rows() < 2 {
        return Err(Error::Numerical("at least two rows are required to fit a model".into()));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design or targets contain NaN/inf".into()));
    }
    Ok(())
}

/// Lasso by cyclic coordinate descent on standardized columns.
///
/// Minimizes `(1/2n) sum (y - a - x'b)^2 + lambda * sum |b_p * sd_p|`, i.e. the
/// usual penalty on the standardized scale; the intercept is unpenalized and
/// constant columns get a zero coefficient. Coefficients are returned on the
/// original scale.
pub fn fit_lasso(x: &Design, y: &[f64], lambda: f64) -> Result<LinearModel> {
    Ok(fit_lasso_traced(x, y, lambda)?.model)
}

pub fn fit_lasso_traced(x: &Design, y: &[f64], lambda: f64) -> Result<LassoFit> {
    check_inputs(x, y)?;
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", format!("{lambda} must be non-negative")));
    }
    let stats = GramStats::from_rows(x.rows().zip(y.iter().copied()), x.n_cols());
    let problem = StandardizedProblem::new(&stats);
    let mut b = vec![0.0; problem.p];
    let mut trace = vec![problem.objective(&b, lambda)];
    let sweeps = problem.descend(&mut b, lambda, Some(&mut trace));
    Ok(LassoFit {
        model: problem.to_model(&b),
        objective_trace: trace,
        sweeps,
    })
}

/// `max_p |<x~_p, y - ybar>| / n` on standardized columns: the smallest
/// penalty at which every slope is zero.
pub fn lasso_lambda_max(x: &Design, y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    let stats = GramStats::from_rows(x.rows().zip(y.iter().copied()), x.n_cols());
    Ok(StandardizedProblem::new(&stats).lambda_max())
}

/// How to choose a penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSpec {
    Fixed(f64),
    /// Grid `lambda_max * ratio^k, k = 0..grid_size`, chosen by K-fold CV with
    /// folds formed from whole individuals.
    CrossValidated { grid_size: usize, ratio: f64, folds: usize },
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::CrossValidated {
            grid_size: 11,
            ratio: 0.5,
            folds: 5,
        }
    }
}

impl LambdaSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        match *self {
            LambdaSpec::Fixed(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::config(field, format!("fixed penalty {l} must be finite and non-negative")))
            }
            LambdaSpec::CrossValidated { grid_size, ratio, folds }
                if grid_size == 0 || !(ratio > 0.0 && ratio < 1.0) || folds < 2 =>
            {
                Err(Error::config(field, "cross-validation needs grid_size >= 1, ratio in (0,1), folds >= 2"))
            }
            _ => Ok(()),
        }
    }
}

/// Assigns each distinct group (individual) to one of `folds` folds.
pub(crate) fn assign_folds(groups: &[usize], folds: usize, seed: u64, stream: u64) -> (Vec<usize>, usize) {
    let mut distinct: Vec<usize> = groups.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let folds = folds.min(distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    distinct.shuffle(&mut rng);
    let fold_of_group: std::collections::HashMap<usize, usize> =
        distinct.iter().enumerate().map(|(k, &g)| (g, k % folds.max(1))).collect();
    (groups.iter().map(|g| fold_of_group[g]).collect(), folds)
}

const NUISANCE_CV_STREAM: u64 = (1 << 62) + 1;

/// Lasso with the penalty picked by individual-blocked cross-validation on
/// held-out squared error. Returns the fitted model and the chosen penalty.
pub fn fit_lasso_cv(x: &Design, y: &[f64], groups: &[usize], spec: LambdaSpec, seed: u64) -> Result<(LinearModel, f64)> {
    check_inputs(x, y)?;
    spec.validate("lambda")?;
    let p = x.n_cols();
    let (grid_size, ratio, folds) = match spec {
        LambdaSpec::Fixed(l) => return Ok((fit_lasso(x, y, l)?, l)),
        LambdaSpec::CrossValidated { grid_size, ratio, folds } => (grid_size, ratio, folds),
    };
    let (fold_of_row, folds) = assign_folds(groups, folds, seed, NUISANCE_CV_STREAM);

    let mut fold_stats = vec![GramStats::zeros(p); folds];
    for (r, row) in x.rows().enumerate() {
        fold_stats[fold_of_row[r]].accumulate(row, y[r]);
    }
    let fold_stats: Vec<GramStats> = fold_stats.into_iter().map(GramStats::finish).collect();
    let total = fold_stats.iter().skip(1).fold(fold_stats[0].clone(), |acc, s| acc.plus(s));
    let full = StandardizedProblem::new(&total);
    let lambda_max = full.lambda_max();
    let grid: Vec<f64> = (0..grid_size).map(|k| lambda_max * ratio.powi(k as i32)).collect();

    let best = if folds < 2 || lambda_max == 0.0 {
        grid.len() - 1
    } else {
        let mut loss = vec![0.0; grid.len()];
        for (f, held) in fold_stats.iter().enumerate() {
            let train = StandardizedProblem::new(&total.minus(held));
            let mut b = vec![0.0; p];
            let held_rows: Vec<usize> = (0..x.n_rows()).filter(|&r| fold_of_row[r] == f).collect();
            for (k, &lambda) in grid.iter().enumerate() {
                train.descend(&mut b, lambda, None);
                let model = train.to_model(&b);
                loss[k] += held_rows
                    .iter()
                    .map(|&r| {
                        let e = y[r] - model.predict(x.row(r));
                        e * e
                    })
                    .sum::<f64>();
            }
        }
        // ties resolve toward the larger penalty
        let mut best = 0;
        for k in 1..grid.len() {
            if loss[k] < loss[best] {
                best = k;
            }
        }
        best
    };

    let mut b = vec![0.0; p];
    for &lambda in &grid[..=best] {
        full.descend(&mut b, lambda, None);
    }
    Ok((full.to_model(&b), grid[best]))
}

/// Design row for the outcome model: `[X (P), A_t, A_{t-1}, X * A_t (P)]`.
/// `action_override` replaces `A_t` before the interactions are formed.
pub fn build_features(data: &PanelDataset, i: usize, j: usize, action_override: Option<u8>) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * data.n_covariates() + 2);
    write_features(data, i, j, action_override, &mut row);
    row
}

fn write_features(data: &PanelDataset, i: usize, j: usize, action_override: Option<u8>, row: &mut Vec<f64>) {
    let x = data.covariates(i, j);
    let a = f64::from(action_override.unwrap_or_else(|| data.action(i, j)));
    row.clear();
    row.extend_from_slice(x);
    row.push(a);
    row.push(f64::from(data.previous_action(i, j)));
    row.extend(x.iter().map(|v| v * a));
}

/// Fitted arm means `mu_0`, `mu_1` sharing one joint regressor.
pub struct NuisanceEstimates {
    regressor: Box<dyn Regressor>,
    pub lambda: Option<f64>,
}

impl std::fmt::Debug for NuisanceEstimates {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceEstimates").field("lambda", &self.lambda).finish_non_exhaustive()
    }
}

impl NuisanceEstimates {
    /// Wraps any regressor trained on [`build_features`] rows.
    pub fn from_regressor(regressor: Box<dyn Regressor>) -> Self {
        Self { regressor, lambda: None }
    }

    pub fn regressor(&self) -> &dyn Regressor {
        self.regressor.as_ref()
    }
}

impl OutcomeModel for NuisanceEstimates {
    fn mu(&self, data: &PanelDataset, i: usize, j: usize, arm: u8) -> f64 {
        self.regressor.predict(&build_features(data, i, j, Some(arm)))
    }
}

/// Fits the joint outcome model on every `(i, j)` of the nuisance set with
/// `j <= train_horizon`.
pub fn estimate_nuisance(
    data: &PanelDataset,
    split: &TrainingSplit,
    lambda: LambdaSpec,
    seed: u64,
) -> Result<NuisanceEstimates> {
    if split.nuisance_ids.is_empty() {
        return Err(Error::config("split", "nuisance set is empty"));
    }
    let width = 2 * data.n_covariates() + 2;
    let rows = split.nuisance_ids.len() * split.train_horizon;
    let mut x = Design::with_capacity(width, rows);
    let mut y = Vec::with_capacity(rows);
    let mut groups = Vec::with_capacity(rows);
    let mut row = Vec::with_capacity(width);
    for &i in &split.nuisance_ids {
        for j in 1..=split.train_horizon {
            write_features(data, i, j, None, &mut row);
            x.push_row(&row);
            y.push(data.outcome(i, j));
            groups.push(i);
        }
    }
    let (model, chosen) = if y.len() < 2 {
        // a single cell: the constant fit is the only sensible estimate
        (LinearModel::constant(y[0], width), 0.0)
    } else {
        fit_lasso_cv(&x, &y, &groups, lambda, seed)?
    };
    Ok(NuisanceEstimates {
        regressor: Box::new(model),
        lambda: Some(chosen),
    })
}
