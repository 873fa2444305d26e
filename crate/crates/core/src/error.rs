use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an op's shape rule.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Non-finite value detected at a checked boundary.
    #[error("numeric failure in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric {
        context: String,
        step: Option<usize>,
    },

    /// API misuse: wrong tape, missing router, unconverted site, ...
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user input (token ids, dataset, clustering arguments).
    #[error("input error: {0}")]
    Input(String),

    /// Configuration or spec validation, one entry per violation.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(context: impl Into<String>, step: Option<usize>) -> Self {
        Error::Numeric {
            context: context.into(),
            step,
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Input(_)
            | Error::Validation(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Format { .. } | Error::Json(_) => 4,
            Error::Io { .. } => 1,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
