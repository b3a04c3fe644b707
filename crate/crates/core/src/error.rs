use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One failed check while validating a dataset entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub entry: usize,
    pub field: String,
    pub reason: String,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "entry {}: {}: {}", self.entry, self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("png decode error: {0}")]
    Decode(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("backend error while embedding {kind} batch [{start}, {end}): {source}")]
    Backend {
        kind: &'static str,
        start: usize,
        end: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("protocol error: {message} (body: {excerpt:?})")]
    Protocol { message: String, excerpt: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("fixture lookup failed: no {kind} embedding recorded for key {key}")]
    Lookup { kind: &'static str, key: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation failed with {} issue(s): {}", .0.len(), join_issues(.0))]
    Validation(Vec<ValidationIssue>),
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by bad user input (usage or data validation),
    /// as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Decode(_)
                | Error::UnsupportedFormat(_)
                | Error::Degenerate(_)
        )
    }
}
