//! Uncertainty-guided probing of model representations.
//!
//! Samples are scored by the dispersion of repeated model answers, sorted by
//! that score and cut into overlapping windows. A ridge probe is trained on
//! each window and the relation between window uncertainty and probe quality
//! is summarised with rank correlations. Importance-guided masking
//! (remove-and-test, remove-and-retrain) checks which features the probes
//! depend on, and a planted sparse-linear generator provides data with a
//! known answer for every stage.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod probe;
pub mod rng;
pub mod segmentation;
pub mod synthetic;
pub mod uncertainty;

pub use error::{Error, Result};

/// Crate version, embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
