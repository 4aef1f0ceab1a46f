//! Pseudo-outcomes: unbiased proxies for the unobservable individual effect.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::OutcomeModel;
use crate::panel::{PanelDataset, TrainingSplit};
use crate::util::{fmt_f64, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Ipw,
    #[default]
    Dr,
}

fn check_propensity(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Positivity {
            individual: String::new(),
            point: 0,
            value: pi,
        })
    }
}

#[inline]
fn ipw_factor(a: u8, pi: f64) -> f64 {
    (f64::from(a) - pi) / (pi * (1.0 - pi))
}

/// `(a - pi) / (pi (1 - pi)) * y`
pub fn ipw_transform(y: f64, a: u8, pi: f64) -> Result<f64> {
    check_propensity(pi)?;
    Ok(ipw_factor(a, pi) * y)
}

/// `(a - pi) / (pi (1 - pi)) * (y - mu_a) + mu_1 - mu_0`
pub fn dr_transform(y: f64, a: u8, pi: f64, mu0: f64, mu1: f64) -> Result<f64> {
    check_propensity(pi)?;
    let mu_a = if a == 1 { mu1 } else { mu0 };
    Ok(ipw_factor(a, pi) * (y - mu_a) + mu1 - mu0)
}

/// Pseudo-outcome for one panel cell.
pub fn cell_pseudo_outcome(
    data: &PanelDataset,
    estimates: &dyn OutcomeModel,
    learner: Learner,
    i: usize,
    j: usize,
) -> Result<f64> {
    let (y, a, pi) = (data.outcome(i, j), data.action(i, j), data.propensity(i, j));
    let value = match learner {
        Learner::Ipw => ipw_transform(y, a, pi),
        Learner::Dr => dr_transform(y, a, pi, estimates.mu(data, i, j, 0), estimates.mu(data, i, j, 1)),
    };
    value.map_err(|e| match e {
        Error::Positivity { value, .. } => Error::Positivity {
            individual: data.label(i).to_string(),
            point: j,
            value,
        },
        other => other,
    })
}

/// Which split members to transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Model,
    Calibration,
    Test,
}

/// Pseudo-outcomes keyed by `(individual index, decision point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomeTable {
    pub learner: Learner,
    pub cells: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

impl PseudoOutcomeTable {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Writes `individual_id,decision_point,pseudo_outcome`.
    pub fn write_csv(&self, data: &PanelDataset, path: &Path) -> Result<()> {
        let mut out = String::from("individual_id,decision_point,pseudo_outcome\n");
        for (&(i, j), v) in self.cells.iter().zip(&self.values) {
            out.push_str(&format!("{},{},{}\n", data.label(i), j, fmt_f64(*v)));
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Transforms the listed individuals at decision points `1..=last_point`.
pub fn transform_cells(
    data: &PanelDataset,
    individuals: &[usize],
    last_point: usize,
    estimates: &dyn OutcomeModel,
    learner: Learner,
) -> Result<PseudoOutcomeTable> {
    let mut cells = Vec::with_capacity(individuals.len() * last_point);
    let mut values = Vec::with_capacity(individuals.len() * last_point);
    for &i in individuals {
        for j in 1..=last_point {
            values.push(cell_pseudo_outcome(data, estimates, learner, i, j)?);
            cells.push((i, j));
        }
    }
    Ok(PseudoOutcomeTable { learner, cells, values })
}

/// Transforms the requested split roles. Model and calibration individuals
/// are restricted to the training horizon; test individuals use every point.
pub fn transform_dataset(
    data: &PanelDataset,
    split: &TrainingSplit,
    roles: &[SplitRole],
    estimates: &dyn OutcomeModel,
    learner: Learner,
) -> Result<PseudoOutcomeTable> {
    let mut table = PseudoOutcomeTable {
        learner,
        cells: Vec::new(),
        values: Vec::new(),
    };
    for role in roles {
        let (ids, last) = match role {
            SplitRole::Model => (&split.model_ids, split.train_horizon),
            SplitRole::Calibration => (&split.calibration_ids, split.train_horizon),
            SplitRole::Test => (&split.test_ids, data.n_points()),
        };
        let part = transform_cells(data, ids, last, estimates, learner)?;
        table.cells.extend(part.cells);
        table.values.extend(part.values);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ipw_reference_values() {
        assert_eq!(ipw_transform(2.0, 1, 0.5).unwrap(), 4.0);
        assert_eq!(ipw_transform(2.0, 0, 0.5).unwrap(), -4.0);
        assert!((ipw_transform(1.0, 1, 0.25).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn dr_with_exact_means_returns_the_effect_plus_weighted_noise() {
        // y = mu_a exactly, so only mu1 - mu0 survives
        assert_eq!(dr_transform(3.0, 1, 0.3, 1.0, 3.0).unwrap(), 2.0);
        assert_eq!(dr_transform(1.0, 0, 0.3, 1.0, 3.0).unwrap(), 2.0);
    }

    #[test]
    fn boundary_propensity_is_rejected() {
        for pi in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(ipw_transform(1.0, 1, pi), Err(Error::Positivity { .. })));
            assert!(matches!(dr_transform(1.0, 1, pi, 0.0, 0.0), Err(Error::Positivity { .. })));
        }
    }
}
