//! Conformity scores, time-localized weights and weighted quantiles.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `V = max(q_lo - y, y - q_hi)`
#[inline]
pub fn conformity_score(pseudo_outcome: f64, q_lower: f64, q_upper: f64) -> f64 {
    (q_lower - pseudo_outcome).max(pseudo_outcome - q_upper)
}

/// How calibration scores are weighted by their distance from the target
/// decision point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Equal,
    /// `psi^d`
    #[default]
    Decay,
    /// `psi^(d^2)`
    Dsq,
    /// `psi^sqrt(d)`
    Drt,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [WeightScheme::Equal, WeightScheme::Decay, WeightScheme::Dsq, WeightScheme::Drt];

    /// Unnormalized weight at distance `d = |t - j|`.
    pub fn weight(self, psi: f64, distance: usize) -> f64 {
        let d = distance as f64;
        match self {
            WeightScheme::Equal => 1.0,
            WeightScheme::Decay => psi.powf(d),
            WeightScheme::Dsq => psi.powf(d * d),
            WeightScheme::Drt => psi.powf(d.sqrt()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Equal => "equal",
            WeightScheme::Decay => "decay",
            WeightScheme::Dsq => "dsq",
            WeightScheme::Drt => "drt",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::config("weight_scheme", format!("unknown scheme `{s}`")))
    }
}

/// Weighting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub scheme: WeightScheme,
    pub psi: f64,
    /// Mass of the point at `+inf` before normalization.
    pub w_inf: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Decay,
            psi: 0.7,
            w_inf: 1.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0 && self.psi <= 1.0) {
            return Err(Error::config("psi", format!("{} is not in (0,1]", self.psi)));
        }
        if !(self.w_inf > 0.0 && self.w_inf.is_finite()) {
            return Err(Error::config("w_inf", format!("{} must be positive and finite", self.w_inf)));
        }
        Ok(())
    }
}

/// Normalized weights for one target: calibration cells plus the `+inf` atom.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWeights {
    pub calibration: Vec<f64>,
    pub infinity: f64,
}

/// Weights of calibration cells at `points` for target decision point `target`.
pub fn weights_for_target(points: &[usize], target: usize, cfg: &WeightConfig) -> Result<TargetWeights> {
    cfg.validate()?;
    let raw: Vec<f64> = points.iter().map(|&j| cfg.scheme.weight(cfg.psi, target.abs_diff(j))).collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateWeights { target });
    }
    let total = sum + cfg.w_inf;
    Ok(TargetWeights {
        calibration: raw.iter().map(|w| w / total).collect(),
        infinity: cfg.w_inf / total,
    })
}

const MASS_TOLERANCE: f64 = 1e-12;

/// Smallest score `q` whose cumulative normalized weight reaches `level`,
/// with the remaining mass `1 - sum(weights)` sitting at `+inf`.
///
/// Equal scores are grouped, so ties never split the mass. Returns `+inf`
/// when the finite scores cannot reach `level`.
pub fn weighted_quantile(scores: &[f64], weights: &[f64], level: f64) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut cum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let v = scores[order[k]];
        while k < order.len() && scores[order[k]] == v {
            cum += weights[order[k]];
            k += 1;
        }
        if cum >= level - MASS_TOLERANCE {
            return v;
        }
    }
    f64::INFINITY
}

/// A (possibly unbounded) prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
}

impl PredictionInterval {
    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `[q_lo - Q, q_hi + Q]`, or the whole line when `Q` is infinite.
pub fn build_interval(q_lower: f64, q_upper: f64, threshold: f64) -> PredictionInterval {
    if threshold.is_infinite() {
        PredictionInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    } else {
        PredictionInterval {
            lower: q_lower - threshold,
            upper: q_upper + threshold,
        }
    }
}

/// Calibration scores sorted once, for fast per-target weighted quantiles.
///
/// Each score carries its decision point and the first target at which it
/// may be used; cells unavailable for a target get weight 0.
#[derive(Debug, Clone)]
pub struct CalibrationPool {
    scores: Vec<f64>,
    points: Vec<usize>,
    first_target: Vec<usize>,
    max_point: usize,
}

impl CalibrationPool {
    /// `entries` are `(score, decision point, first usable target)`.
    pub fn new(mut entries: Vec<(f64, usize, usize)>) -> Result<Self> {
        if entries.iter().any(|e| e.0.is_nan()) {
            return Err(Error::NonFinite("calibration score is NaN".into()));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let max_point = entries.iter().map(|e| e.1).max().unwrap_or(0);
        Ok(Self {
            scores: entries.iter().map(|e| e.0).collect(),
            points: entries.iter().map(|e| e.1).collect(),
            first_target: entries.iter().map(|e| e.2).collect(),
            max_point,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Weighted `(1 - alpha)` quantile of the scores available at `target`.
    pub fn threshold(&self, target: usize, cfg: &WeightConfig, alpha: f64) -> Result<f64> {
        let table: Vec<f64> = (0..=self.max_point.max(target))
            .map(|d| cfg.scheme.weight(cfg.psi, d))
            .collect();
        let weight = |k: usize| {
            if target >= self.first_target[k] {
                table[target.abs_diff(self.points[k])]
            } else {
                0.0
            }
        };
        let sum: f64 = (0..self.len()).map(weight).sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateWeights { target });
        }
        let total = sum + cfg.w_inf;
        let level = 1.0 - alpha;
        let mut cum = 0.0;
        let mut k = 0;
        while k < self.len() {
            let v = self.scores[k];
            while k < self.len() && self.scores[k] == v {
                cum += weight(k) / total;
                k += 1;
            }
            if cum >= level - MASS_TOLERANCE {
                return Ok(v);
            }
        }
        Ok(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_is_signed_distance_to_band() {
        assert_eq!(conformity_score(0.0, -1.0, 1.0), -1.0);
        assert_eq!(conformity_score(3.0, -1.0, 1.0), 2.0);
        assert_eq!(conformity_score(-2.0, -1.0, 1.0), 1.0);
    }

    #[test]
    fn scheme_shapes() {
        assert_eq!(WeightScheme::Decay.weight(0.5, 3), 0.125);
        assert_eq!(WeightScheme::Dsq.weight(0.5, 2), 0.0625);
        assert_eq!(WeightScheme::Drt.weight(0.5, 4), 0.25);
        assert_eq!(WeightScheme::Equal.weight(0.5, 40), 1.0);
        for s in WeightScheme::ALL {
            assert_eq!(s.weight(0.3, 0), 1.0);
            assert_eq!(s.name().parse::<WeightScheme>().unwrap(), s);
        }
    }

    #[test]
    fn psi_one_collapses_to_equal() {
        let pts = [1, 4, 9, 20];
        let eq = weights_for_target(&pts, 3, &WeightConfig { scheme: WeightScheme::Equal, psi: 1.0, w_inf: 1.0 }).unwrap();
        for s in WeightScheme::ALL {
            let w = weights_for_target(&pts, 3, &WeightConfig { scheme: s, psi: 1.0, w_inf: 1.0 }).unwrap();
            assert_eq!(w, eq);
        }
    }

    #[test]
    fn underflowing_weights_are_an_error() {
        let cfg = WeightConfig { scheme: WeightScheme::Dsq, psi: 0.01, w_inf: 1.0 };
        assert!(matches!(weights_for_target(&[1], 400, &cfg), Err(Error::DegenerateWeights { target: 400 })));
        let pool = CalibrationPool::new(vec![(0.5, 1, 0)]).unwrap();
        assert!(matches!(pool.threshold(400, &cfg, 0.1), Err(Error::DegenerateWeights { .. })));
    }

    #[test]
    fn infinite_threshold_gives_the_whole_line() {
        let pi = build_interval(0.0, 1.0, f64::INFINITY);
        assert!(!pi.is_bounded());
        assert!(pi.contains(1e300));
    }

    #[test]
    fn pool_skips_cells_not_yet_available() {
        // the large score is only usable from target 5 on
        let pool = CalibrationPool::new(vec![(1.0, 1, 0), (9.0, 4, 5)]).unwrap();
        let cfg = WeightConfig { scheme: WeightScheme::Equal, psi: 1.0, w_inf: 0.01 };
        assert_eq!(pool.threshold(4, &cfg, 0.1).unwrap(), 1.0);
        assert_eq!(pool.threshold(5, &cfg, 0.1).unwrap(), 9.0);
    }

    #[test]
    fn reference_weights() {
        let decay = |d| WeightScheme::Decay.weight(0.7, d);
        assert_eq!((decay(0), decay(1)), (1.0, 0.7));
        assert!((decay(2) - 0.49).abs() < 1e-15);
        assert!((WeightScheme::Dsq.weight(0.7, 2) - 0.2401).abs() < 1e-15);
        let w = weights_for_target(&[1, 2, 3, 4], 2, &WeightConfig { scheme: WeightScheme::Equal, psi: 1.0, w_inf: 1.0 }).unwrap();
        assert!(w.calibration.iter().all(|&v| v == 0.2));
        assert_eq!(w.infinity, 0.2);
    }

    #[test]
    fn negative_threshold_shrinks_the_band() {
        let a = build_interval(0.0, 1.0, 0.2);
        assert_eq!((a.lower, a.upper), (-0.2, 1.2));
        assert!((a.length() - 1.4).abs() < 1e-15);
        let b = build_interval(0.0, 1.0, -0.1);
        assert_eq!((b.lower, b.upper), (0.1, 0.9));
    }
}
