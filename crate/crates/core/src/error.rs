use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("underdetermined calibration for configuration {config}: {rows} training rows, need at least {required}")]
    Underdetermined {
        config: usize,
        rows: usize,
        required: usize,
    },

    #[error("no trained kernel for sampling configuration {0}")]
    MissingConfig(String),

    #[error("Landweber iteration diverged at iteration {iteration}; use a smaller step size")]
    Diverged { iteration: usize },

    #[error("training loss became non-finite at step {step}")]
    TrainingDiverged { step: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("header dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
