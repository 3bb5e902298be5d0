//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-finite value produced by {what} at path {path}, step {step}")]
    NonFinite {
        what: String,
        path: usize,
        step: usize,
    },

    #[error("non-finite coefficient output of {coefficient} at t={t}, x={x:?}, u={u}")]
    NonFiniteCoefficient {
        coefficient: String,
        t: f64,
        x: Vec<f64>,
        u: f64,
    },

    #[error(
        "rank-deficient regression matrix at time step {step} (t={t}); \
         basis functions are collinear on the sampled states"
    )]
    RankDeficientRegression { step: usize, t: f64 },

    #[error("time {t} is not a node of the grid (t0={t0}, T={t_end}, steps={steps})")]
    OffGridTime {
        t: f64,
        t0: f64,
        t_end: f64,
        steps: usize,
    },

    #[error("Riccati integration escaped to infinity at t={escape_time}")]
    RiccatiBlowUp { escape_time: f64 },

    #[error("scenario error: {0}")]
    Scenario(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
