use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{message}")]
    Conflict { message: String, existing_id: String },
    #[error("{0}")]
    Unavailable(String),
    #[error("stored record {0} failed its integrity check")]
    Integrity(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Integrity(_) | ServiceError::Config(_) | ServiceError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Conflict { .. } => "conflict",
            ServiceError::Unavailable(_) => "unavailable",
            ServiceError::Integrity(_) => "integrity_error",
            ServiceError::Config(_) => "config",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind(), "detail": self.to_string() });
        if let ServiceError::Conflict { existing_id, .. } = &self {
            body["existing_id"] = json!(existing_id);
        }
        (self.status(), Json(body)).into_response()
    }
}
