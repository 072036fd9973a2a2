#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN
//! Graph-augmented HAR forecasting of multivariate realized volatility.
//!
//! The crate covers the full pipeline: realized-variance estimation and lag
//! features ([`data`]), spillover graphs and graphical-lasso estimation
//! ([`graph`]), linear and graph-neural forecasters ([`model`]), OLS and
//! Adam training ([`train`]), rolling backtests ([`backtest`]) and forecast
//! evaluation ([`eval`]).

pub mod backtest;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod train;

pub use error::{Error, ErrorClass, Result};
