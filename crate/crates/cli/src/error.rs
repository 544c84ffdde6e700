//! Exit-code classification for command failures.

use std::fmt;
use std::path::Path;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T = ()> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self {
            code: DATA,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

fn code_of(e: &actembed::Error) -> u8 {
    if e.is_numeric_failure() {
        NUMERIC
    } else if e.is_data_error() {
        DATA
    } else {
        USAGE
    }
}

impl From<actembed::Error> for CliError {
    fn from(e: actembed::Error) -> Self {
        Self {
            code: code_of(&e),
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: DATA,
            error: e.into(),
        }
    }
}

/// Attaches the file a failure came from, keeping its exit code.
pub trait AtPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> AtPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let e: CliError = e.into();
            CliError {
                code: e.code,
                error: e.error.context(path.display().to_string()),
            }
        })
    }
}
