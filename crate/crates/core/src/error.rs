use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the pipeline.
///
/// The variants map onto the failure classes the CLI reports through its
/// exit code: parameter and contract errors are caller mistakes, data and
/// parse errors come from input files, numeric errors come from training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("data error in segment {segment}, channel {channel}: {message}")]
    Data {
        segment: usize,
        channel: usize,
        message: String,
    },

    #[error("pair constraint: {0}")]
    Constraint(String),

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn { .. }
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::EmptyInput(_)
                | Error::Data { .. }
                | Error::Constraint(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
        )
    }

    pub fn is_numeric_failure(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
