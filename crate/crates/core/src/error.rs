use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed document. `line`/`column` are 1-based when known.
    #[error("parse error{}: {message}", location(*.line, *.column))]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("OD pair ({origin} -> {destination}) {reason}")]
    Unreachable {
        origin: u32,
        destination: u32,
        reason: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

fn location(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(err: serde_json::Error) -> Self {
        if err.is_io() {
            return Error::Parse {
                line: None,
                column: None,
                message: err.to_string(),
            };
        }
        Error::Parse {
            line: Some(err.line()).filter(|&l| l > 0),
            column: Some(err.column()).filter(|&c| c > 0),
            message: err.to_string(),
        }
    }

    /// Process exit status used by the command-line tool. Each error class
    /// maps to its own code so scripts can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } => 4,
            Error::Validation(_) | Error::Unreachable { .. } => 5,
            Error::Fingerprint { .. } => 6,
            Error::Domain(_) | Error::Shape(_) => 7,
            Error::Numerical(_) | Error::Training { .. } => 8,
            Error::Config(_) => 9,
        }
    }
}
