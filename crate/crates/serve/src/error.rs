use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use onesug_core::corpus::UnknownLevel;
use onesug_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("prefix must be non-empty")]
    EmptyPrefix,

    #[error("k must be between 1 and {max}, got {k}")]
    BadK { k: usize, max: usize },

    #[error("field `{0}` must be non-empty")]
    EmptyField(&'static str),

    #[error(transparent)]
    UnknownLevel(#[from] UnknownLevel),

    #[error("malformed request: {0}")]
    Malformed(String),

    #[error("snapshot swap refused: {0}")]
    SwapRefused(#[source] CoreError),

    #[error("feedback log {}: {source}", path.display())]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("worker failed: {0}")]
    Worker(String),
}

impl ServeError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServeError::EmptyPrefix
            | ServeError::BadK { .. }
            | ServeError::EmptyField(_)
            | ServeError::UnknownLevel(_)
            | ServeError::Malformed(_) => StatusCode::BAD_REQUEST,
            ServeError::SwapRefused(_) => StatusCode::CONFLICT,
            ServeError::Log { .. } | ServeError::Core(_) | ServeError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(serde_json::json!({ "ok": false, "error": self.to_string() }))).into_response()
    }
}
