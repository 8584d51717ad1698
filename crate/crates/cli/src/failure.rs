use std::fmt;
use std::path::Path;

use mipeaks::Error;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INSUFFICIENT: u8 = 3;
pub const EXIT_VIOLATION: u8 = 4;
pub const EXIT_DIVERGENCE: u8 = 5;

/// A failed run: the process exit code and the message printed to stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    /// Prefixes the message with the path that caused it.
    pub fn at(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
        move |e| {
            let mut f = Failure::from(e);
            f.message = format!("{}: {}", path.display(), f.message);
            f
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InsufficientData(_) | Error::DegenerateInput(_) => EXIT_INSUFFICIENT,
            Error::Training { .. } => EXIT_DIVERGENCE,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
