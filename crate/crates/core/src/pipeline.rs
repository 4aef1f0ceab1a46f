//! End-to-end interval construction: split, nuisance fit, pseudo-outcomes,
//! quantile pair, calibration scores and weighted intervals.
//!
//! Fitting and calibration are separate steps so that several weighting
//! schemes can be evaluated against the same fitted models.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{build_interval, conformity_score, CalibrationPool, PredictionInterval, WeightConfig};
use crate::error::{Error, Result, StageExt};
use crate::nuisance::{estimate_nuisance, LambdaSpec, NuisanceEstimates};
use crate::panel::{load_csv, load_potential_outcomes, split, ColumnSchema, PanelDataset, TrainSize, TrainingSplit};
use crate::pseudo::{cell_pseudo_outcome, Learner};
use crate::quantile::{fit_quantile_pair, qr_features, signed_errors, QuantileBand, QuantileModelPair, QuantileTuning};
use crate::linalg::Design;
use crate::synthetic::{generate, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// New individuals at decision points seen during fitting.
    #[default]
    Downward,
    /// Known individuals at decision points after the training horizon.
    Outward,
}

/// Whose future decision points are predicted in outward mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutwardTargets {
    #[default]
    Calibration,
    Test,
}

/// Where the panel comes from. Without `path` the synthetic generator runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub potential_outcomes: Option<PathBuf>,
    pub n_covariates: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub lambda: LambdaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alpha: f64,
    pub learner: Learner,
    pub mode: PredictionMode,
    pub train_frac: f64,
    /// Exact number of training individuals; overrides `train_frac`.
    pub train_count: Option<usize>,
    /// Last decision point used for fitting and calibration.
    pub train_horizon: Option<usize>,
    /// Lets test individuals' cells before the target point join the calibration pool.
    pub augment_cal_with_test_history: bool,
    pub outward_targets: OutwardTargets,
    pub data: DataConfig,
    pub simulation: SimConfig,
    pub nuisance: NuisanceConfig,
    pub quantile: QuantileTuning,
    pub weights: WeightConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.05,
            learner: Learner::Dr,
            mode: PredictionMode::Downward,
            train_frac: 0.75,
            train_count: None,
            train_horizon: None,
            augment_cal_with_test_history: false,
            outward_targets: OutwardTargets::Calibration,
            data: DataConfig::default(),
            simulation: SimConfig::default(),
            nuisance: NuisanceConfig::default(),
            quantile: QuantileTuning::default(),
            weights: WeightConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("{} is not in (0,1)", self.alpha)));
        }
        if self.train_count.is_none() && !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return Err(Error::config("train_frac", format!("{} is not in (0,1]", self.train_frac)));
        }
        if self.data.path.is_none() {
            self.simulation.validate()?;
        }
        if self.mode == PredictionMode::Outward && self.train_horizon.is_none() {
            return Err(Error::config("train_horizon", "outward mode needs a training horizon"));
        }
        self.nuisance.lambda.validate("nuisance.lambda")?;
        self.quantile.lambda.validate("quantile.lambda")?;
        self.weights.validate()
    }

    fn train_size(&self) -> TrainSize {
        match self.train_count {
            Some(c) => TrainSize::Count(c),
            None => TrainSize::Fraction(self.train_frac),
        }
    }
}

/// Loads the configured CSV panel, or simulates one with the experiment seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<PanelDataset> {
    match &cfg.data.path {
        Some(path) => {
            let data = load_csv(path, ColumnSchema { n_covariates: cfg.data.n_covariates })?;
            match &cfg.data.potential_outcomes {
                Some(po) => load_potential_outcomes(po, data),
                None => Ok(data),
            }
        }
        None => generate(&SimConfig {
            seed: cfg.seed,
            ..cfg.simulation.clone()
        }),
    }
    .stage("data")
}

/// A panel cell with its quantile band, pseudo-outcome and conformity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCell {
    pub individual: usize,
    pub point: usize,
    pub band: QuantileBand,
    pub pseudo_outcome: f64,
    pub true_ite: Option<f64>,
    pub score: f64,
    /// Score of the true effect under the same band.
    pub oracle_score: Option<f64>,
}

/// Calibration scores `V` with their cell indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub cells: Vec<ScoredCell>,
}

impl CalibrationSet {
    pub fn scores(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.score).collect()
    }

    pub fn oracle_scores(&self) -> Option<Vec<f64>> {
        self.cells.iter().map(|c| c.oracle_score).collect()
    }
}

/// One test cell's interval and evaluation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    pub individual: usize,
    pub point: usize,
    pub band: QuantileBand,
    pub threshold: f64,
    pub interval: PredictionInterval,
    pub pseudo_outcome: f64,
    pub true_ite: Option<f64>,
}

impl IntervalRecord {
    pub fn covered_pseudo(&self) -> bool {
        self.interval.contains(self.pseudo_outcome)
    }

    pub fn covered_true(&self) -> Option<bool> {
        self.true_ite.map(|v| self.interval.contains(v))
    }

    pub fn length(&self) -> f64 {
        self.interval.length()
    }
}

/// Intervals for every test cell of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBatch {
    pub alpha: f64,
    pub weights: WeightConfig,
    pub records: Vec<IntervalRecord>,
}

/// Fitted models and scored cells, ready for calibration under any weights.
#[derive(Debug)]
pub struct FittedExperiment {
    pub split: TrainingSplit,
    pub nuisance: NuisanceEstimates,
    pub quantiles: QuantileModelPair,
    pub alpha: f64,
    pub calibration: CalibrationSet,
    /// Scored cells of the predicted individuals outside the calibration set.
    /// Targets are flagged; all of them may join the pool when augmenting.
    pub history: Vec<ScoredCell>,
    pub is_target: Vec<bool>,
    pub augment: bool,
}

fn score_individual(
    data: &PanelDataset,
    i: usize,
    points: std::ops::RangeInclusive<usize>,
    nuisance: &NuisanceEstimates,
    pair: &QuantileModelPair,
    learner: Learner,
) -> Result<Vec<ScoredCell>> {
    let errors = signed_errors(data, nuisance, i, *points.end());
    points
        .map(|j| {
            let band = pair.predict(&qr_features(data, i, j, &errors, pair.lags));
            let pseudo_outcome = cell_pseudo_outcome(data, nuisance, learner, i, j)?;
            let true_ite = data.true_ite(i, j);
            Ok(ScoredCell {
                individual: i,
                point: j,
                band,
                pseudo_outcome,
                true_ite,
                score: conformity_score(pseudo_outcome, band.lower, band.upper),
                oracle_score: true_ite.map(|v| conformity_score(v, band.lower, band.upper)),
            })
        })
        .collect()
}

/// Quantile design and pseudo-outcome targets for the model set.
fn model_rows(
    data: &PanelDataset,
    split: &TrainingSplit,
    nuisance: &NuisanceEstimates,
    learner: Learner,
    lags: crate::quantile::LagSet,
) -> Result<(Design, Vec<f64>, Vec<usize>)> {
    let h = split.train_horizon;
    let parts: Vec<(Vec<Vec<f64>>, Vec<f64>)> = split
        .model_ids
        .par_iter()
        .map(|&i| {
            let errors = signed_errors(data, nuisance, i, h);
            let mut rows = Vec::with_capacity(h);
            let mut targets = Vec::with_capacity(h);
            for j in 1..=h {
                rows.push(qr_features(data, i, j, &errors, lags));
                targets.push(cell_pseudo_outcome(data, nuisance, learner, i, j)?);
            }
            Ok((rows, targets))
        })
        .collect::<Result<_>>()?;
    let width = data.n_covariates() + 1 + lags.lags().len();
    let mut x = Design::with_capacity(width, split.model_ids.len() * h);
    let mut y = Vec::with_capacity(split.model_ids.len() * h);
    let mut groups = Vec::with_capacity(split.model_ids.len() * h);
    for (&i, (rows, targets)) in split.model_ids.iter().zip(parts) {
        for row in &rows {
            x.push_row(row);
        }
        groups.extend(std::iter::repeat_n(i, targets.len()));
        y.extend(targets);
    }
    Ok((x, y, groups))
}

/// Runs every fitting step and scores calibration and prediction cells.
pub fn fit(data: &PanelDataset, cfg: &ExperimentConfig) -> Result<FittedExperiment> {
    cfg.validate()?;
    let t_max = data.n_points();
    if let Some(h) = cfg.train_horizon {
        if cfg.mode == PredictionMode::Outward && h >= t_max {
            return Err(Error::config(
                "train_horizon",
                format!("outward mode needs a horizon below T = {t_max}, got {h}"),
            ));
        }
    }
    let split = split(data, cfg.train_size(), cfg.seed, cfg.train_horizon).stage("split")?;
    let h = split.train_horizon;
    let nuisance = estimate_nuisance(data, &split, cfg.nuisance.lambda, cfg.seed).stage("nuisance")?;
    let (x, y, groups) = model_rows(data, &split, &nuisance, cfg.learner, cfg.quantile.lags).stage("pseudo")?;
    let quantiles = fit_quantile_pair(&x, &y, &groups, cfg.alpha, &cfg.quantile, cfg.seed).stage("quantile")?;
    drop((x, y, groups));

    let calibration: Vec<ScoredCell> = split
        .calibration_ids
        .par_iter()
        .map(|&i| score_individual(data, i, 1..=h, &nuisance, &quantiles, cfg.learner))
        .collect::<Result<Vec<_>>>()
        .stage("calibration")?
        .into_iter()
        .flatten()
        .collect();

    let (predicted, first_target, history_start) = match (cfg.mode, cfg.outward_targets) {
        (PredictionMode::Downward, _) => (&split.test_ids, 1, 1),
        (PredictionMode::Outward, OutwardTargets::Calibration) => (&split.calibration_ids, h + 1, h + 1),
        (PredictionMode::Outward, OutwardTargets::Test) => (&split.test_ids, h + 1, 1),
    };
    if predicted.is_empty() {
        let field = if cfg.train_count.is_some() { "train_count" } else { "train_frac" };
        return Err(Error::config(field, "leaves no individuals to predict")).stage("split");
    }
    let history: Vec<ScoredCell> = predicted
        .par_iter()
        .map(|&i| score_individual(data, i, history_start..=t_max, &nuisance, &quantiles, cfg.learner))
        .collect::<Result<Vec<_>>>()
        .stage("prediction")?
        .into_iter()
        .flatten()
        .collect();
    let is_target = history.iter().map(|c| c.point >= first_target).collect();

    Ok(FittedExperiment {
        split,
        nuisance,
        quantiles,
        alpha: cfg.alpha,
        calibration: CalibrationSet { cells: calibration },
        history,
        is_target,
        augment: cfg.augment_cal_with_test_history,
    })
}

impl FittedExperiment {
    /// Calibration pool: base cells always, history cells from the next
    /// decision point on when augmenting.
    pub fn pool(&self) -> Result<CalibrationPool> {
        let mut entries: Vec<(f64, usize, usize)> = self.calibration.cells.iter().map(|c| (c.score, c.point, 0)).collect();
        if self.augment {
            entries.extend(self.history.iter().map(|c| (c.score, c.point, c.point + 1)));
        }
        CalibrationPool::new(entries)
    }

    /// Intervals for all target cells under `weights`.
    pub fn calibrate(&self, weights: &WeightConfig) -> Result<IntervalBatch> {
        weights.validate()?;
        let pool = self.pool().stage("calibration")?;
        let mut targets: Vec<usize> = self
            .history
            .iter()
            .zip(&self.is_target)
            .filter(|(_, &t)| t)
            .map(|(c, _)| c.point)
            .collect();
        targets.sort_unstable();
        targets.dedup();
        let max_target = targets.last().copied().unwrap_or(0);
        let thresholds: Vec<(usize, f64)> = targets
            .par_iter()
            .map(|&t| Ok((t, pool.threshold(t, weights, self.alpha)?)))
            .collect::<Result<_>>()
            .stage("calibration")?;
        let mut by_target = vec![f64::NAN; max_target + 1];
        for (t, q) in thresholds {
            by_target[t] = q;
        }
        let records = self
            .history
            .iter()
            .zip(&self.is_target)
            .filter(|(_, &t)| t)
            .map(|(c, _)| {
                let threshold = by_target[c.point];
                IntervalRecord {
                    individual: c.individual,
                    point: c.point,
                    band: c.band,
                    threshold,
                    interval: build_interval(c.band.lower, c.band.upper, threshold),
                    pseudo_outcome: c.pseudo_outcome,
                    true_ite: c.true_ite,
                }
            })
            .collect();
        Ok(IntervalBatch {
            alpha: self.alpha,
            weights: *weights,
            records,
        })
    }

    /// Scores of the predicted target cells.
    pub fn target_cells(&self) -> impl Iterator<Item = &ScoredCell> {
        self.history.iter().zip(&self.is_target).filter(|(_, &t)| t).map(|(c, _)| c)
    }
}

/// Output of a single run.
#[derive(Debug)]
pub struct RunOutput {
    pub batch: IntervalBatch,
    pub fitted: FittedExperiment,
}

/// Fits and calibrates with the configured weights.
pub fn run(data: &PanelDataset, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let fitted = fit(data, cfg)?;
    let batch = fitted.calibrate(&cfg.weights)?;
    Ok(RunOutput { batch, fitted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn outward_needs_a_horizon() {
        let err = ExperimentConfig::from_toml("mode = \"outward\"").unwrap_err();
        assert!(err.to_string().contains("train_horizon"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("alpah = 0.1").is_err());
    }

    #[test]
    fn bad_simulation_field_is_named() {
        let err = ExperimentConfig::from_toml("[simulation]\nrho = 1.5").unwrap_err();
        assert!(err.to_string().contains("rho"), "{err}");
    }
}
