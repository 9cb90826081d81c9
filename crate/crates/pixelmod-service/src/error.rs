//! Error responses: a status plus `{code, message, details}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pixelmod::corpus_store::StoreError;
use pixelmod::ocr::OcrError;
use pixelmod::pipeline::PipelineError;
use pixelmod::stories::StoriesError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Machine-readable error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Validation,
    Unauthorized,
    NotFound,
    AlreadyMember,
    VersionConflict,
    IdempotencyKeyReused,
    IdempotencyInFlight,
    ProviderUnavailable,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::Validation => StatusCode::BAD_REQUEST,
            ErrorCode::Unauthorized => StatusCode::UNAUTHORIZED,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::AlreadyMember | ErrorCode::VersionConflict | ErrorCode::IdempotencyInFlight => StatusCode::CONFLICT,
            ErrorCode::IdempotencyKeyReused => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::ProviderUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub details: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Validation, message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(ErrorCode::NotFound, format!("unknown {what} {id:?}"))
            .with_details(serde_json::json!({ "kind": what, "id": id }))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::UnknownImage(id) => ApiError::not_found("image", &id),
            StoreError::UnknownSeedSet(name) => ApiError::not_found("seed set", &name),
            StoreError::AlreadyMember { set, image_id } => ApiError::new(ErrorCode::AlreadyMember, message)
                .with_details(serde_json::json!({ "seed_set": set, "image_id": image_id })),
            StoreError::VersionConflict { set, expected, actual } => ApiError::new(ErrorCode::VersionConflict, message)
                .with_details(serde_json::json!({ "seed_set": set, "expected": expected, "actual": actual })),
            StoreError::SeedSetExists(_)
            | StoreError::Validation(_)
            | StoreError::Manifest { .. }
            | StoreError::HashMismatch(_) => ApiError::validation(message),
            StoreError::Io(_)
            | StoreError::Locked(_)
            | StoreError::Corrupt(_)
            | StoreError::Reconcile(_)
            | StoreError::Index(_) => {
                ApiError::internal(message)
            }
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        match e {
            PipelineError::Ocr(OcrError::ProviderUnavailable(_)) => ApiError::new(ErrorCode::ProviderUnavailable, message),
            PipelineError::Source { id, .. } => ApiError::not_found("image", &id),
            PipelineError::AllSeedsFailed(failures)
                if failures.iter().all(|(_, m)| m.contains("OCR provider unavailable")) =>
            {
                ApiError::new(ErrorCode::ProviderUnavailable, message)
            }
            PipelineError::Export(_) => ApiError::internal(message),
            _ => ApiError::validation(message),
        }
    }
}

impl From<StoriesError> for ApiError {
    fn from(e: StoriesError) -> Self {
        ApiError::validation(e.to_string())
    }
}
