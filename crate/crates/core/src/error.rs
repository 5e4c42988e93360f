//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset generation, coefficient solves, fitting and
/// experiment runs. The CLI maps these onto process exit codes, so the
/// distinction between configuration, validation, numerical and generation
/// failures is part of the public contract.
#[derive(Debug, Error)]
pub enum Error {
    /// A spec or config is malformed or names an unknown entity.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numerical procedure failed (ill-conditioning, divergence).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Adaptive integration drove the substep below machine feasibility.
    #[error("numerical error: step underflow at t={t}, state={state:?}")]
    StepUnderflow { t: f64, state: Vec<f64> },

    /// Trajectory or dataset generation failed.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
}
