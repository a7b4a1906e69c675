use hmtd_core::collab::CollabError;
use hmtd_core::context::ContextError;
use hmtd_core::prescription::{PrescriptionError, SessionId};
use hmtd_core::tag::{TagError, TagIdentity};
use hmtd_core::taskmodel::TaskModelError;
use hmtd_core::trace::{LedgerError, ReplayError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Prescription(#[from] PrescriptionError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    TaskModel(#[from] TaskModelError),
    #[error("unknown intervention session {0}")]
    UnknownSession(SessionId),
    #[error("unknown workflow {0}")]
    UnknownWorkflow(u16),
    #[error("no tag snapshot for {0}")]
    TagNotFound(TagIdentity),
    #[error("operation needs network access but connectivity is offline")]
    Offline,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot bind {0}")]
    BindFailure(String),
    #[error("data directory unwritable: {0}")]
    DataDirUnwritable(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Prescription(e) => e.code(),
            ServiceError::Tag(e) => e.code(),
            ServiceError::Ledger(e) => e.code(),
            ServiceError::Replay(e) => e.code(),
            ServiceError::Context(e) => e.code(),
            ServiceError::Collab(e) => e.code(),
            ServiceError::TaskModel(e) => e.code(),
            ServiceError::UnknownSession(_) => "UnknownSession",
            ServiceError::UnknownWorkflow(_) => "UnknownWorkflow",
            ServiceError::TagNotFound(_) => "TagNotFound",
            ServiceError::Offline => "Offline",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Config(_) => "ConfigurationError",
            ServiceError::BindFailure(_) => "BindFailure",
            ServiceError::DataDirUnwritable(_) => "DataDirUnwritable",
        }
    }

    /// HTTP status for the error body.
    pub fn status(&self) -> u16 {
        match self.code() {
            "Unqualified" => 403,
            "UnknownBadge" | "UnknownSession" | "UnknownWorkflow" | "UnknownPart" | "UnknownMachine"
            | "TagNotFound" | "ExpertUnavailable" => 404,
            "MachineMismatch" | "WrongPhase" | "IncompleteWorkflow" | "SessionClosed" | "Offline" => 409,
            "WrongKind" | "CorruptTag" | "InvalidReplacement" | "InvalidRecord" | "InvalidIdentity" => 422,
            "BadRequest" | "MalformedIndication" | "ParseError" | "InvalidEvent" => 400,
            _ => 500,
        }
    }

    /// Structured detail for the error body.
    pub fn detail(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            ServiceError::Prescription(PrescriptionError::MachineMismatch { expected, found }) => {
                json!({"expected": expected, "found": found})
            }
            ServiceError::Prescription(PrescriptionError::IncompleteWorkflow { validated, total }) => {
                json!({"validated": validated, "total": total})
            }
            ServiceError::Prescription(PrescriptionError::WrongPhase { operation, phase }) => {
                json!({"operation": operation, "phase": phase})
            }
            ServiceError::Prescription(PrescriptionError::Unqualified { badge_id, required }) => {
                json!({"badge-id": badge_id, "required": required})
            }
            ServiceError::UnknownSession(id) => json!({"session-id": id}),
            ServiceError::TagNotFound(identity) => json!({"kind": identity.kind, "entity-id": identity.entity_id}),
            _ => serde_json::Value::Null,
        }
    }
}
