use thiserror::Error;

use crate::runtime::TrainingTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("parse error at line {line}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        line: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("party {party} may not read labels")]
    LabelAccess { party: usize },

    #[error("role error: {0}")]
    Role(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid party count {0}: at least 2 parties are required")]
    InvalidPartyCount(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The stop criterion was not met within the epoch budget. The partial
    /// trace is kept so callers can still report what happened.
    #[error("target not reached after {epochs} epochs (last objective {last_objective:e})")]
    NonConvergence {
        epochs: usize,
        last_objective: f64,
        partial: Box<TrainingTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
