//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("invalid label value {0}, expected one of {{0, 1, 2, 4}}")]
    InvalidLabels(i64),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("region nesting violated: enhancing ⊆ core ⊆ whole does not hold")]
    NestingViolation,

    #[error("spatial size {0} not divisible by {1}")]
    IndivisibleShape(usize, usize),

    #[error("squeeze-excitation reduction leaves bottleneck width < 1")]
    InvalidReduction,

    #[error("epoch {epoch} out of range [0, {total}]")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("{cases} cases cannot be split into {folds} folds")]
    TooFewCases { cases: usize, folds: usize },

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("probability {0} outside [0, 1]")]
    OutOfRangeProbability(f64),

    #[error("loss diverged (non-finite) at epoch {0}; last finite checkpoint kept")]
    DivergedLoss(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
