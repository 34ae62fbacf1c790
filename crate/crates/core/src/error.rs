//! Error type shared by every module.

/// Errors raised by the engine, the pricers and the command surface.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A one-step martingale probability fell outside (0, 1).
    #[error("calibration infeasible at step {step}: q = {q} for asset {asset}")]
    CalibrationInfeasible { step: usize, asset: usize, q: f64 },

    /// Internal inconsistency detected while evolving a portfolio.
    #[error("engine error at step {step}: {msg}")]
    Engine { step: usize, msg: String },

    /// A NaN or infinite value appeared.
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    /// A fixed-point or Picard loop did not settle.
    #[error("no convergence at step {step} (residual {residual:e}); try a finer grid")]
    Convergence { step: usize, residual: f64 },

    /// The hypotheses of a check are not met.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// A strategy breaks the admissibility lower bound.
    #[error("inadmissible strategy: discounted netted wealth {value} below bound at step {step}, node {node}")]
    Inadmissible {
        step: usize,
        node: usize,
        value: f64,
    },

    /// Scenario file failed schema validation.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// File-system failure.
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn engine(step: usize, msg: impl Into<String>) -> Self {
        Error::Engine {
            step,
            msg: msg.into(),
        }
    }

    pub fn numeric(step: usize, msg: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            msg: msg.into(),
        }
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    /// Process exit code for the command surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidInput(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
