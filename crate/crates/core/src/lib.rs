//! Buy-it-again recommendation engine.
//!
//! The engine ranks the categories a shopper is likely to repurchase from with a
//! small neural classifier fed by population survival curves, per-shopper ARIMA
//! forecasts and a few behavioural counters. Items inside each category are ranked
//! from personal frequency, recency and units-per-trip, and the two rankings are
//! interleaved into one list.
//!
//! Module map:
//!
//! - [`ingest`]: transaction CSV parsing, per-user histories, temporal split and labels
//! - [`survival`]: per-category life tables and the six survival curve features
//! - [`forecast`]: conditional least squares ARIMA(p, d, 0) and the two forecast features
//! - [`features`]: the 11-column feature matrix and z-score normalisation
//! - [`pcmodel`]: the category classifier, its training loop and permutation importance
//! - [`icrank`]: within-category item ranking and the alpha/beta grid search
//! - [`recommend`]: merging category and item ranks, deployment filters, top-K
//! - [`eval`]: metrics, baselines, cross-validation and the synthetic shopper generator
//! - [`config`]: the `key = value` run configuration shared by every stage

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod forecast;
pub mod icrank;
pub mod ingest;
pub mod pcmodel;
pub mod pipeline;
pub mod recommend;
pub mod seed;
pub mod survival;

pub use error::{Error, Result};
