use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use blendfield::guidance::GuidanceError;
use blendfield::metrics::MetricsError;
use blendfield::renderer::RenderError;
use blendfield::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Io(_) => "io",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Io(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Machine-readable form used on stderr and in HTTP bodies.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({"error": self.kind(), "message": self.to_string()})
    }
}

impl From<RenderError> for ServiceError {
    fn from(e: RenderError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

impl From<TrainError> for ServiceError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Geometry(_) | TrainError::Blend(_) => {
                ServiceError::BadRequest(e.to_string())
            }
            TrainError::Io(_) | TrainError::State(_) => ServiceError::Io(e.to_string()),
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<GuidanceError> for ServiceError {
    fn from(e: GuidanceError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<MetricsError> for ServiceError {
    fn from(e: MetricsError) -> Self {
        ServiceError::BadRequest(e.to_string())
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Io(e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.to_json())).into_response()
    }
}
