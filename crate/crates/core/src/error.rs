use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {what} at node {node}")]
    NonFinite { what: String, node: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("operation requires a scalar scenario (n = m = d = 1)")]
    NotScalar,

    #[error("atom index {0} is not part of the measure")]
    UnknownAtom(usize),

    #[error("node triple out of order: need t >= theta >= s, got ({t}, {theta}, {s})")]
    OutOfRange { t: usize, theta: usize, s: usize },

    #[error("simulation diverged at node {node}")]
    Diverged { node: usize },

    #[error("need at least {needed} paths, got {got}")]
    TooFewPaths { needed: usize, got: usize },

    #[error("node {0} was not recorded by the simulation")]
    NotRecorded(usize),

    #[error("riccati: {0}")]
    Riccati(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
