use thiserror::Error;

/// Errors produced while building or running a problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("delay spec: {0}")]
    Delay(String),

    #[error("jump model: {0}")]
    Levy(String),

    #[error("measure: {0}")]
    Measure(String),

    #[error("problem spec: {0}")]
    Problem(String),

    #[error("driver returned a non-finite value at t = {t} (grid step {step}), particle {particle}")]
    NonFiniteDriver { t: f64, step: usize, particle: usize },

    #[error("lifted function returned a non-finite value")]
    NonFiniteLift,

    #[error("comparison setup: {0}")]
    Comparison(String),

    #[error("ensemble i/o: {0}")]
    EnsembleIo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
