//! Micro-randomized trial simulator.
//!
//! Each individual is simulated sequentially. Latent covariates start as an
//! equicorrelated Gaussian vector and evolve autoregressively with action
//! carry-over; observed covariates are their standard-normal CDF transform.
//! Actions are Bernoulli with a logistic propensity. Both potential outcomes
//! are evaluated with shared AR(1) noise, so the true effect of a cell is
//! `theta3 + theta4' X + eps_trt` exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::panel::{PanelDataset, PanelParts, PotentialOutcomes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Linear,
    NonLinear,
}

/// How the outcome noise parameter `sigma_y` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `sigma_y` is the variance of the AR(1) innovations.
    Variance,
    /// `sigma_y` is the standard deviation of the AR(1) innovations.
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_individuals: usize,
    pub n_points: usize,
    pub n_covariates: usize,
    /// Equicorrelation of the initial latent covariates.
    pub rho: f64,
    /// Diagonal autoregressive coefficient of the covariates.
    pub gamma: f64,
    /// Carry-over of the previous action into every covariate.
    pub gamma0: f64,
    /// Variance of the additive covariate noise.
    pub cov_noise_var1: f64,
    /// Variance of the action-residual covariate noise.
    pub cov_noise_var2: f64,
    /// Leading propensity coefficients; padded with zeros up to `n_covariates`.
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub theta1: f64,
    pub theta2: Vec<f64>,
    pub theta3: f64,
    pub theta4: Vec<f64>,
    /// Coefficients that replace `theta2` / `theta4` after the changepoint.
    pub theta2_post: Vec<f64>,
    pub theta4_post: Vec<f64>,
    pub sigma_y: f64,
    pub sigma_y_scale: NoiseScale,
    /// AR(1) coefficient of both outcome noise processes.
    pub ar_coeff: f64,
    pub outcome_kind: OutcomeKind,
    /// Last decision point before the effect reversal, if any.
    pub changepoint: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_individuals: 2000,
            n_points: 50,
            n_covariates: 50,
            rho: 0.2,
            gamma: 0.7,
            gamma0: 0.5,
            cov_noise_var1: 0.5,
            cov_noise_var2: 0.25,
            beta: vec![0.5, 0.3],
            beta0: 0.25,
            theta1: 0.5,
            theta2: vec![2.0, 1.0],
            theta3: 0.7,
            theta4: vec![1.0, 2.0],
            theta2_post: vec![0.0, -2.0, -1.0],
            theta4_post: vec![-1.0, -3.0, -2.0],
            sigma_y: 0.05,
            sigma_y_scale: NoiseScale::StdDev,
            ar_coeff: 0.5,
            outcome_kind: OutcomeKind::Linear,
            changepoint: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(field, reason));
        if self.n_individuals == 0 {
            return bad("n_individuals", "must be positive".into());
        }
        if self.n_points == 0 {
            return bad("n_points", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho", format!("{} is outside [0, 1)", self.rho));
        }
        if !(self.ar_coeff.abs() < 1.0) {
            return bad("ar_coeff", format!("|{}| must be below 1", self.ar_coeff));
        }
        if !(self.sigma_y > 0.0 && self.sigma_y.is_finite()) {
            return bad("sigma_y", format!("{} must be positive", self.sigma_y));
        }
        for (name, v) in [("cov_noise_var1", self.cov_noise_var1), ("cov_noise_var2", self.cov_noise_var2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("{v} is not a valid variance"));
            }
        }
        let mut coefficients = vec![("beta", &self.beta), ("theta2", &self.theta2), ("theta4", &self.theta4)];
        // post-change coefficients only matter when there is a changepoint
        if self.changepoint.is_some() {
            coefficients.extend([("theta2_post", &self.theta2_post), ("theta4_post", &self.theta4_post)]);
        }
        for (name, v) in coefficients {
            if v.len() > self.n_covariates {
                return bad(name, format!("{} coefficients for {} covariates", v.len(), self.n_covariates));
            }
        }
        if let Some(tc) = self.changepoint {
            if tc <= 1 || tc > self.n_points {
                return bad("changepoint", format!("{tc} is outside (1, {}]", self.n_points));
            }
        }
        Ok(())
    }

    fn innovation_sd(&self) -> f64 {
        match self.sigma_y_scale {
            NoiseScale::Variance => self.sigma_y.sqrt(),
            NoiseScale::StdDev => self.sigma_y,
        }
    }
}

fn padded(v: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    out[..v.len()].copy_from_slice(v);
    out
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Trajectory {
    covariates: Vec<f64>,
    actions: Vec<u8>,
    propensities: Vec<f64>,
    control: Vec<f64>,
    treated: Vec<f64>,
}

struct Coefficients {
    beta: Vec<f64>,
    theta2: Vec<f64>,
    theta4: Vec<f64>,
    theta2_post: Vec<f64>,
    theta4_post: Vec<f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn simulate_individual(cfg: &SimConfig, coef: &Coefficients, i: usize) -> Trajectory {
    let p = cfg.n_covariates;
    let t_max = cfg.n_points;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);

    let mut out = Trajectory {
        covariates: Vec::with_capacity(t_max * p),
        actions: Vec::with_capacity(t_max),
        propensities: Vec::with_capacity(t_max),
        control: Vec::with_capacity(t_max),
        treated: Vec::with_capacity(t_max),
    };
    let sd1 = cfg.cov_noise_var1.sqrt();
    let sd2 = cfg.cov_noise_var2.sqrt();
    let innov = cfg.innovation_sd();
    let stationary = innov / (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt();

    let mut x = vec![0.0; p];
    // A_0 = 0; the lagged propensity is taken as 0 at the first decision point.
    let mut a_prev = 0.0;
    let mut pi_prev = 0.0;
    let mut eps_trt = 0.0;
    let mut eps_y = 0.0;
    for t in 1..=t_max {
        if t == 1 {
            let common = gauss(&mut rng);
            for xk in x.iter_mut() {
                let latent = cfg.rho.sqrt() * common + (1.0 - cfg.rho).sqrt() * gauss(&mut rng);
                *xk = std_normal_cdf(latent);
            }
        } else {
            for xk in x.iter_mut() {
                let e1 = sd1 * gauss(&mut rng);
                let e2 = sd2 * gauss(&mut rng);
                let latent = cfg.gamma * *xk + cfg.gamma0 * a_prev + e1 + (a_prev - pi_prev) * e2;
                *xk = std_normal_cdf(latent);
            }
        }
        let pi = logistic(dot(&coef.beta, &x) + cfg.beta0 * a_prev);
        let a = if rng.random::<f64>() < pi { 1.0 } else { 0.0 };
        if t == 1 {
            eps_trt = stationary * gauss(&mut rng);
            eps_y = stationary * gauss(&mut rng);
        } else {
            eps_trt = cfg.ar_coeff * eps_trt + innov * gauss(&mut rng);
            eps_y = cfg.ar_coeff * eps_y + innov * gauss(&mut rng);
        }

        let post = cfg.changepoint.is_some_and(|tc| t > tc);
        let (theta2, theta4) = if post {
            (&coef.theta2_post, &coef.theta4_post)
        } else {
            (&coef.theta2, &coef.theta4)
        };
        let mut base = cfg.theta1 * (a_prev - pi_prev) + dot(theta2, &x) + eps_y;
        if cfg.outcome_kind == OutcomeKind::NonLinear {
            let indicator = if x.first().is_some_and(|&v| v > 0.5) || x.get(1).is_some_and(|&v| v > 0.5) {
                1.0
            } else {
                0.0
            };
            base += indicator + (t as f64 * std::f64::consts::PI / 7.0).sin().abs();
        }
        let effect = cfg.theta3 + dot(theta4, &x) + eps_trt;

        out.covariates.extend_from_slice(&x);
        out.actions.push(a as u8);
        out.propensities.push(pi);
        out.control.push(base - pi * effect);
        out.treated.push(base + (1.0 - pi) * effect);
        a_prev = a;
        pi_prev = pi;
    }
    out
}

/// Simulates a full panel. Output is a pure function of the config and
/// independent of the rayon thread count.
pub fn generate(cfg: &SimConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let p = cfg.n_covariates;
    let coef = Coefficients {
        beta: padded(&cfg.beta, p),
        theta2: padded(&cfg.theta2, p),
        theta4: padded(&cfg.theta4, p),
        theta2_post: if cfg.changepoint.is_some() { padded(&cfg.theta2_post, p) } else { Vec::new() },
        theta4_post: if cfg.changepoint.is_some() { padded(&cfg.theta4_post, p) } else { Vec::new() },
    };
    let trajectories: Vec<Trajectory> = (0..cfg.n_individuals)
        .into_par_iter()
        .map(|i| simulate_individual(cfg, &coef, i))
        .collect();

    let cells = cfg.n_individuals * cfg.n_points;
    let mut parts = PanelParts {
        n_individuals: cfg.n_individuals,
        n_points: cfg.n_points,
        n_covariates: p,
        labels: None,
        covariates: Vec::with_capacity(cells * p),
        actions: Vec::with_capacity(cells),
        outcomes: Vec::with_capacity(cells),
        propensities: Vec::with_capacity(cells),
        potential: None,
    };
    let mut control = Vec::with_capacity(cells);
    let mut treated = Vec::with_capacity(cells);
    for tr in trajectories {
        parts.covariates.extend(tr.covariates);
        for (k, &a) in tr.actions.iter().enumerate() {
            parts.outcomes.push(if a == 1 { tr.treated[k] } else { tr.control[k] });
        }
        parts.actions.extend(tr.actions);
        parts.propensities.extend(tr.propensities);
        control.extend(tr.control);
        treated.extend(tr.treated);
    }
    parts.potential = Some(PotentialOutcomes { control, treated });
    PanelDataset::new(parts)
}
