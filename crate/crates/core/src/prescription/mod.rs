//! Prescribed intervention workflows.
//!
//! An intervention is only allowed to progress by scanning, for each step and
//! in order, the tool the step requires and then the part it works on. Every
//! accepted or rejected scan yields exactly one trace event; the caller is
//! responsible for appending those to the ledger.

mod session;
mod workflow;

pub use session::{
    ExpectedTag, InterventionSession, Phase, RejectReason, ScanOutcome, ScanResult, ScanSubstate,
    SessionId,
};
pub use workflow::{
    DocAsset, MediaKind, Operator, OperatorDirectory, StepDefinition, StepPhase, WorkflowDefinition,
};

use thiserror::Error;

use crate::tag::TagError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrescriptionError {
    #[error("no operator registered for badge {0}")]
    UnknownBadge(u32),
    #[error("operator {badge_id} lacks qualification `{required}`")]
    Unqualified { badge_id: u32, required: String },
    #[error("machine tag {found} does not match workflow target {expected}")]
    MachineMismatch { expected: u32, found: u32 },
    #[error("operation `{operation}` not allowed in phase {phase:?}")]
    WrongPhase { operation: &'static str, phase: Phase },
    #[error("part {0} is not required by any remaining reassembly step")]
    UnknownPart(u32),
    #[error("invalid replacement part id {0}")]
    InvalidReplacement(u32),
    #[error("only {validated} of {total} steps validated")]
    IncompleteWorkflow { validated: usize, total: usize },
    #[error("invalid workflow: {0}")]
    InvalidWorkflow(String),
    #[error(transparent)]
    Tag(#[from] TagError),
}

impl PrescriptionError {
    pub fn code(&self) -> &'static str {
        match self {
            PrescriptionError::UnknownBadge(_) => "UnknownBadge",
            PrescriptionError::Unqualified { .. } => "Unqualified",
            PrescriptionError::MachineMismatch { .. } => "MachineMismatch",
            PrescriptionError::WrongPhase { .. } => "WrongPhase",
            PrescriptionError::UnknownPart(_) => "UnknownPart",
            PrescriptionError::InvalidReplacement(_) => "InvalidReplacement",
            PrescriptionError::IncompleteWorkflow { .. } => "IncompleteWorkflow",
            PrescriptionError::InvalidWorkflow(_) => "InvalidWorkflow",
            PrescriptionError::Tag(e) => e.code(),
        }
    }
}
