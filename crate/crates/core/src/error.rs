use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("missing field `{field}` for example `{example_id}`")]
    MissingField {
        field: &'static str,
        example_id: String,
    },

    #[error("empty generation: sample {sample} has no output tokens beyond the prompt")]
    EmptyGeneration { sample: usize },

    #[error("degenerate labels: both classes must be present")]
    DegenerateLabels,

    #[error("degenerate quality: quality scores are constant")]
    DegenerateQuality,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing(field: &'static str, example_id: &str) -> Self {
        Error::MissingField {
            field,
            example_id: example_id.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
