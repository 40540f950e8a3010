//! Noisy random-feature regression laboratory.
//!
//! Spectra and eigenfeature maps, random-feature sampling with additive feature
//! noise, minimum-norm least squares and ridge fits, Monte Carlo and closed-form
//! risk decompositions, theoretical bound evaluation, concentration experiments
//! and a seeded sweep harness.

pub mod bounds;
pub mod conc;
pub mod error;
pub mod risk;
pub mod stats;
pub mod estimator;
pub mod features;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod spectrum;

pub use error::{Error, Result};
