use std::io;

use thiserror::Error;

/// Errors produced by dataset construction, likelihood evaluation, the
/// sampler, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bi-level constraint violated: {0}")]
    Constraint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("sampler reached the stage cap ({max_stages}) at lambda = {lambda}")]
    MaxStages { max_stages: usize, lambda: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
