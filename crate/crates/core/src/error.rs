use std::path::PathBuf;

use ndgrad::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] NdError),

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("no records at prefix {prefix:?}, level {level}")]
    EmptySlice { prefix: String, level: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("artifact {} was built under config hash {found}, current is {expected}: re-run `{stage}`", path.display())]
    StaleArtifact {
        stage: &'static str,
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::InvalidInput {
        op,
        msg: msg.into(),
    }
}
