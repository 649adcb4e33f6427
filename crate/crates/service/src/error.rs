use allocrisk::AllocError;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// JSON error body returned by every endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub module: String,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub module: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            module: "service".to_string(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(session_id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "SessionNotFound", format!("no session {session_id}"))
    }

    pub fn conflict(expected: u64, actual: u64) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "RevisionConflict",
            format!("expected revision {expected} but the session is at {actual}"),
        )
        .with_detail(serde_json::json!({ "expected_revision": expected, "revision": actual }))
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "ParseError", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageError", message)
    }

    /// Wraps an engine error with the given status, keeping its code and module.
    pub fn engine(status: StatusCode, err: &AllocError) -> Self {
        let status = match err {
            AllocError::AlreadyScored(_) => StatusCode::CONFLICT,
            _ => status,
        };
        Self {
            status,
            code: err.code().to_string(),
            module: err.module().to_string(),
            message: err.to_string(),
            detail: Value::Null,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.clone(),
            module: self.module.clone(),
            message: self.message.clone(),
            detail: self.detail.clone(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}
