//! Weighted split-conformal prediction intervals for time-varying individual
//! treatment effects in longitudinal (micro-randomized) panels.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod nuisance;
pub mod panel;
pub mod pipeline;
pub mod pseudo;
pub mod quantile;
pub mod synthetic;
pub mod util;

pub use error::{Error, Result};

// The guide's chapters are compiled as doc-tests so their snippets keep
// working as the API changes.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/panels.md")]
    mod panels {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/pseudo-outcomes.md")]
    mod pseudo_outcomes {}
    #[doc = include_str!("../../../book/src/quantile-regression.md")]
    mod quantile_regression {}
    #[doc = include_str!("../../../book/src/weighted-calibration.md")]
    mod weighted_calibration {}
    #[doc = include_str!("../../../book/src/prediction-modes.md")]
    mod prediction_modes {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
