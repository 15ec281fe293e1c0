use std::io;
use std::path::PathBuf;

use serde_json::{json, Value};
use thiserror::Error;

use swipecf_core::abtest::AbTestError;
use swipecf_core::dedup::DedupError;
use swipecf_core::evaluation::MetricError;
use swipecf_core::eventstore::{IngestReport, StoreError};
use swipecf_core::model::{ModelError, UserId};
use swipecf_core::simulator::SimulationError;

/// Every failure the CLI and the HTTP service report.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{message}")]
    Validation {
        message: String,
        report: Option<IngestReport>,
    },
    #[error("store directory {0} does not exist")]
    MissingStore(PathBuf),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("storage failure: {0}")]
    Io(String),
}

impl AppError {
    pub fn validation(message: impl Into<String>) -> Self {
        AppError::Validation {
            message: message.into(),
            report: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::InvalidArgument(_) => "invalid_argument",
            AppError::Validation { .. } => "validation",
            AppError::MissingStore(_) => "missing_store",
            AppError::UnknownUser(_) => "unknown_user",
            AppError::Corrupt(_) => "corrupt_store",
            AppError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::InvalidArgument(_) => 2,
            AppError::Validation { .. } => 3,
            AppError::MissingStore(_) => 4,
            AppError::UnknownUser(_) => 5,
            AppError::Corrupt(_) => 6,
            AppError::Io(_) => 7,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut body = json!({
            "kind": self.kind(),
            "message": self.to_string(),
        });
        if let AppError::Validation {
            report: Some(report),
            ..
        } = self
        {
            body["report"] = serde_json::to_value(report).unwrap_or(Value::Null);
        }
        json!({ "error": body })
    }
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Validation(v) => AppError::validation(v.to_string()),
            StoreError::MissingStore(p) => AppError::MissingStore(p),
            StoreError::Corrupt { .. } | StoreError::Snapshot(_) => {
                AppError::Corrupt(e.to_string())
            }
            StoreError::Model(m) => m.into(),
            StoreError::Io(io) => AppError::Io(io.to_string()),
        }
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownUser(u) => AppError::UnknownUser(u),
            other => AppError::Corrupt(other.to_string()),
        }
    }
}

impl From<io::Error> for AppError {
    fn from(e: io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<DedupError> for AppError {
    fn from(e: DedupError) -> Self {
        AppError::validation(e.to_string())
    }
}

impl From<MetricError> for AppError {
    fn from(e: MetricError) -> Self {
        AppError::validation(e.to_string())
    }
}

impl From<AbTestError> for AppError {
    fn from(e: AbTestError) -> Self {
        AppError::validation(e.to_string())
    }
}

impl From<SimulationError> for AppError {
    fn from(e: SimulationError) -> Self {
        AppError::validation(e.to_string())
    }
}
