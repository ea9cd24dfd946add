//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is out of its admissible range (non-positive scale, bad dimension, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Spectrum calibration cannot be satisfied with the requested inputs.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// A state-space realization cannot be constructed for the requested model.
    #[error("realization failed: {0}")]
    Realization(String),

    /// A matrix that must be symmetric positive semidefinite is not, beyond tolerance.
    #[error("matrix not positive semidefinite: {0}")]
    NotPositiveSemidefinite(String),

    /// The noise generator matrix is not stable (an eigenvalue with non-positive real part).
    #[error("unstable system: {0}")]
    Unstable(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The integrator produced a non-finite coordinate.
    #[error("non-finite state at step {step} (t = {time}): {what}")]
    NonFinite { step: u64, time: f64, what: String },

    /// Two particles closer than the hard-overlap threshold.
    #[error("particles {i} and {j} overlap (r = {r:.3e})")]
    ParticleOverlap { i: usize, j: usize, r: f64 },

    /// A trajectory is too short for the requested finite-difference order.
    #[error("trajectory too short: {0}")]
    ShortTrajectory(String),

    /// Coordinates fed to a displacement observable look box-wrapped.
    #[error("wrapped coordinates detected: {0}")]
    WrappedCoordinates(String),

    /// Finite-difference response is visibly nonlinear in the perturbation strength.
    #[error("nonlinear response: {0}")]
    Nonlinear(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
