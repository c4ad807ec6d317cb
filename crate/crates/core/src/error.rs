use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation, replay, and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {field}")]
    Propagation { field: &'static str },

    #[error("invalid time step {dt} s")]
    InvalidTimeStep { dt: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical health check failed at t={t:.6}: {reason}")]
    NumericalHealth { t: f64, reason: String },

    #[error("feature capacity {0} exceeded")]
    CapacityExceeded(usize),

    #[error("unknown feature id {0}")]
    UnknownFeature(u64),

    #[error("unknown sensor id {0}")]
    UnknownSensor(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: timestamps out of order at line {line} ({t_prev} -> {t})")]
    Monotonicity {
        path: PathBuf,
        line: usize,
        t_prev: f64,
        t: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("trajectories do not overlap in time")]
    EmptyOverlap,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable class name, used for CLI exit reporting and FFI error codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Propagation { .. } | Error::InvalidTimeStep { .. } => "propagation",
            Error::DegenerateGeometry(_) => "geometry",
            Error::NumericalHealth { .. } => "numerical-health",
            Error::CapacityExceeded(_) | Error::UnknownFeature(_) => "feature-bookkeeping",
            Error::UnknownSensor(_) | Error::Parse { .. } | Error::Monotonicity { .. } => "dataset",
            Error::Config(_) => "config",
            Error::InvalidInput(_) | Error::EmptyOverlap => "input",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
