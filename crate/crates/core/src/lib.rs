//! Covariance estimation and portfolio-risk toolkit.
//!
//! Builds covariance estimates from return panels (sample, shrinkage,
//! EM Factor Analysis, exogenous-factor regression), corrects the
//! directional bias of Factor Analysis by Monte-Carlo resampling
//! (directional variance adjustment), solves minimum-variance allocation
//! problems in closed form and evaluates estimators in rolling-window
//! out-of-sample backtests.

pub mod error;
pub mod types;
pub mod rng;
pub mod linalg;
pub mod synthgen;
pub mod estimators;
pub mod dva;
pub mod portfolio;
pub mod backtest;

pub use error::{Error, Result};
pub use types::{CovarianceEstimate, EstimatorTag, FactorModelParams, ReturnsPanel};
