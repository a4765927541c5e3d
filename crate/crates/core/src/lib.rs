//! Analysis of Rydberg-series laser spectroscopy.
//!
//! The crate turns scan traces and level-energy tables into fitted
//! Lorentzian lines, quantum defects and Rydberg-Ritz series parameters.
//!
//! * [`optim`] is the damped least-squares engine every fit uses.
//! * [`lineshape`] models and fits single Lorentzian lines.
//! * [`ritz`] holds the series mathematics and the three fitting methods.
//! * [`stability`] computes Allan deviations of frequency records.
//! * [`synth`] generates seeded synthetic data and independent oracles.
//! * [`pipeline`] reads and writes files, budgets errors and runs batch analyses.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lineshape;
pub mod optim;
pub mod pipeline;
pub mod ritz;
pub mod stability;
pub mod synth;

pub use error::{Error, Result};
