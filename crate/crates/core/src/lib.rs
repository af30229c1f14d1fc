//! Below-threshold two-mode squeezing in Kerr microresonators.
//!
//! The crate covers the whole chain from a pumped resonator to a measured
//! homodyne noise trace:
//!
//! * [`model`]: resonator, drive, material and detection-chain parameters
//! * [`steady`]: pump steady state, multistability and oscillation threshold
//! * [`spectra`]: linearized side-mode input/output theory and lossy
//!   homodyne spectra
//! * [`langevin`]: time-domain stochastic integrator used as an independent
//!   check of [`spectra`]
//! * [`trace`]: transmission-trace ingestion, Lorentzian fitting and
//!   quality-factor statistics
//! * [`config`] / [`cli`]: the `squeezesim` command-line front end

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod config;
pub mod error;
pub mod langevin;
pub mod model;
pub mod spectra;
pub mod steady;
pub mod trace;
pub mod validate;

pub use error::{Error, Result};
