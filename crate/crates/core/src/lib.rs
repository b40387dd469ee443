//! Aggregate user-load modelling for shared resource providers.
//!
//! Users attach to one of `N` providers according to latent cluster
//! preferences; only aggregate loads and provider availabilities are
//! observed. The crate simulates such data, fits Bayesian cluster models by
//! adaptive MCMC, draws posterior predictive loads for new availability
//! patterns and scores their calibration.

pub mod cli;
pub mod dist;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod prediction;
pub mod simplex;
pub mod simulator;
pub mod transform;

pub use error::{Error, Result};
