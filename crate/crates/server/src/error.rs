use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use vilod_core::persistence::StoreError;
use vilod_core::{DetectorError, WorkflowError};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("no session for this user")]
    NoSession,
    #[error("a session is already being started for this user")]
    SessionStarting,
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("no image file for {0}")]
    NoImageFile(String),
    #[error("unknown training job")]
    UnknownJob,
    #[error("malformed annotation body: {0}")]
    MalformedBody(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Internal(String),
}

impl From<DetectorError> for ApiError {
    fn from(e: DetectorError) -> Self {
        ApiError::Workflow(e.into())
    }
}

/// Status and stable code for each workflow error. Exhaustive on purpose:
/// a new variant must be given a code here.
pub fn workflow_status(e: &WorkflowError) -> (StatusCode, &'static str) {
    match e {
        WorkflowError::PhaseViolation { .. } => (StatusCode::CONFLICT, "PhaseViolation"),
        WorkflowError::BudgetExceeded { .. } => (StatusCode::CONFLICT, "BudgetExceeded"),
        WorkflowError::NotSelectable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "NotSelectable"),
        WorkflowError::NotPending(_) => (StatusCode::NOT_FOUND, "NotPending"),
        WorkflowError::InvalidBoxes(_) => (StatusCode::BAD_REQUEST, "InvalidBoxes"),
        WorkflowError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "InvalidConfig"),
        WorkflowError::ReplayExhausted { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "ReplayExhausted"),
        WorkflowError::Detector(d) => detector_status(d),
        WorkflowError::Projection(_) => (StatusCode::INTERNAL_SERVER_ERROR, "ProjectionFailed"),
        WorkflowError::Uncertainty(_) => (StatusCode::INTERNAL_SERVER_ERROR, "UncertaintyFailed"),
        WorkflowError::Evaluation(_) => (StatusCode::INTERNAL_SERVER_ERROR, "EvaluationFailed"),
    }
}

pub fn detector_status(e: &DetectorError) -> (StatusCode, &'static str) {
    match e {
        DetectorError::BackendUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "BackendUnavailable"),
        DetectorError::ConcurrentTraining => (StatusCode::CONFLICT, "ConcurrentTraining"),
        DetectorError::TrainingFailed(_) => (StatusCode::BAD_GATEWAY, "TrainingFailed"),
        DetectorError::UnknownModel(_) => (StatusCode::BAD_GATEWAY, "UnknownModel"),
        DetectorError::EmptyManifest => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyManifest"),
        DetectorError::UnknownClass(_) => (StatusCode::BAD_REQUEST, "UnknownClass"),
        DetectorError::Protocol(_) => (StatusCode::BAD_GATEWAY, "ProtocolError"),
    }
}

impl ApiError {
    pub fn status(&self) -> (StatusCode, &'static str) {
        match self {
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "Unauthorized"),
            ApiError::NoSession => (StatusCode::NOT_FOUND, "NoSession"),
            ApiError::SessionStarting => (StatusCode::CONFLICT, "SessionStarting"),
            ApiError::UnknownImage(_) => (StatusCode::NOT_FOUND, "UnknownImage"),
            ApiError::NoImageFile(_) => (StatusCode::NOT_FOUND, "NoImageFile"),
            ApiError::UnknownJob => (StatusCode::NOT_FOUND, "UnknownJob"),
            ApiError::MalformedBody(_) => (StatusCode::BAD_REQUEST, "InvalidBoxes"),
            ApiError::Workflow(e) => workflow_status(e),
            ApiError::Store(StoreError::NotSelectable(_)) => (StatusCode::UNPROCESSABLE_ENTITY, "NotSelectable"),
            ApiError::Store(StoreError::UnknownImage(_)) => (StatusCode::NOT_FOUND, "UnknownImage"),
            ApiError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "StoreError"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status();
        if status.is_server_error() {
            log::error!("{code}: {self}");
        }
        let body = ErrorBody {
            error: code,
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}
