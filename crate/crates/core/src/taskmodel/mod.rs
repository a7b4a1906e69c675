//! Interaction analysis: CTT task trees, device configuration derivation
//! against a device referential, and IRVO models with a perceptual
//! continuity score.

mod ctt;
mod devices;
mod irvo;

pub use ctt::{load_task_tree, CttNode, Modality, TaskCategory, TemporalOperator};
pub use devices::{
    derive_configurations, derive_for_needs, load_referential, DeviceConfiguration, DeviceDescriptor,
    MAX_REFERENTIAL_SIZE,
};
pub use irvo::{
    continuity_score, continuity_score_for, load_irvo, validate_irvo, Arrow, Channel, Entity, EntityKind,
    FusionFrame, IrvoModel, Violation,
};

use std::fmt;

use serde::de::DeserializeOwned;
use thiserror::Error;

/// First problem found in a model document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    /// Field path to the offending value, e.g. `children[1].category`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} column {} at `{}`: {}", self.line, self.column, self.path, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskModelError {
    #[error("parse error: {0}")]
    Parse(ParseError),
    #[error("no device in the referential provides {0:?}")]
    UncoverableNeed(Modality),
    #[error("invalid device referential: {0}")]
    InvalidReferential(String),
    #[error("invalid IRVO model: {}", join_violations(.0))]
    InvalidModel(Vec<Violation>),
}

fn join_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl TaskModelError {
    pub fn code(&self) -> &'static str {
        match self {
            TaskModelError::Parse(_) => "ParseError",
            TaskModelError::UncoverableNeed(_) => "UncoverableNeed",
            TaskModelError::InvalidReferential(_) => "InvalidReferential",
            TaskModelError::InvalidModel(_) => "InvalidModel",
        }
    }
}

pub(crate) fn parse_document<T: DeserializeOwned>(document: &str) -> Result<T, TaskModelError> {
    let mut deserializer = serde_json::Deserializer::from_str(document);
    let value: T = serde_path_to_error::deserialize(&mut deserializer).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        TaskModelError::Parse(ParseError {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        })
    })?;
    deserializer.end().map_err(|e| {
        TaskModelError::Parse(ParseError { line: e.line(), column: e.column(), path: ".".into(), message: e.to_string() })
    })?;
    Ok(value)
}

pub(crate) fn structure_error(path: String, message: String) -> TaskModelError {
    TaskModelError::Parse(ParseError { line: 0, column: 0, path, message })
}
