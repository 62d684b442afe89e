use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure at block {block}: {reason}")]
    NumericalFailure { block: usize, reason: &'static str },

    #[error("query time {tau} s lies outside trajectory support [{start}, {end}] s")]
    OutOfSupport { tau: f64, start: f64, end: f64 },

    #[error("insufficient overlap: {found} anchor knots overlap the other trajectory, at least {required} required")]
    InsufficientOverlap { found: usize, required: usize },

    #[error("insufficient correspondences: {found} pairs, at least {required} required")]
    InsufficientCorrespondences { found: usize, required: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Io(String),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;
