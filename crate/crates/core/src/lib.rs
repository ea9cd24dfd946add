//! Sensitivity estimation for particle systems driven by colored noise.
//!
//! The noise is realized as a linear state-space system driven by white noise,
//! which makes the path measure Gaussian in the driving increments and lets
//! sensitivities of ensemble averages be sampled from unperturbed trajectories
//! alongside stochastic weight processes (Malliavin weights).

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod harmonic;
pub mod malliavin;
pub mod noise;
pub mod numeric;
pub mod observables;
pub mod stats;

pub use error::{Error, Result};
