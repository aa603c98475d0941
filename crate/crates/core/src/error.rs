use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("gap in series for client `{client}`: expected hour {missing_hour}, {detail}")]
    Gap {
        client: String,
        missing_hour: i64,
        detail: String,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot aggregate an empty set of updates")]
    EmptyAggregation,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numeric failure{}: {message}", round.map(|r| format!(" in round {r}")).unwrap_or_default())]
    Numeric {
        round: Option<usize>,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientData(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = configuration, 2 = data, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
