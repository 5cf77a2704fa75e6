use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("cannot partition a {l}x{m} image into {t} uniform blocks")]
    Partition { l: usize, m: usize, t: usize },

    #[error("inconsistent block grid: {0}")]
    InconsistentGrid(String),

    #[error("permutation length {got} does not match block count {expected}")]
    PermutationLength { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    #[error("unit alignment error: {0}")]
    Alignment(String),

    #[error("mechanism mismatch: expected {expected}, got {got}")]
    MechanismMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("undefined baseline: {0}")]
    UndefinedBaseline(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Partition { .. } => "partition",
            Error::InconsistentGrid(_) => "inconsistent_grid",
            Error::PermutationLength { .. } => "permutation_length",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Config(_) => "config",
            Error::Singular(_) => "singular",
            Error::Underdetermined(_) => "underdetermined",
            Error::Alignment(_) => "alignment",
            Error::MechanismMismatch { .. } => "mechanism_mismatch",
            Error::UndefinedBaseline(_) => "undefined_baseline",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
