use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("example {index}: {source}")]
    AtExample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Domain { .. } => "domain",
            Error::Contract(_) => "contract",
            Error::EmptyInput(_) => "empty-input",
            Error::Range(_) => "range",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Stage { source, .. } | Error::AtExample { source, .. } => source.category(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
