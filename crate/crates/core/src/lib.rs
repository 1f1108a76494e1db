//! Conformal prediction toolkit for fingerprint-based indoor positioning.
//!
//! - [`dataset`]: UJIIndoorLoc ingestion, RSSI normalization, seeded splits
//!   and a synthetic log-distance RSSI world.
//! - [`predictor`]: weighted k-NN matcher and imported external predictions.
//! - [`score`]: non-conformity scores.
//! - [`conformal`]: split-conformal quantiles, class sets and coordinate regions.
//! - [`risk`]: conformal risk control of per-path FDR/FNR.
//! - [`pvalue`]: conformal p-values and reliability filtering.
//! - [`harness`]: alpha/risk sweeps and deterministic reports.

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod predictor;
pub mod pvalue;
pub mod risk;
pub mod score;

pub use error::{Error, Result};
