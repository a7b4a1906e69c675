use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::PrescriptionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepPhase {
    Disassembly,
    Reassembly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaKind {
    Text,
    Image,
    Video,
    Sound,
}

/// Documentation shown alongside a step. Only the reference is carried; the
/// media itself is never fetched or played.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DocAsset {
    pub media: MediaKind,
    pub uri: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StepDefinition {
    pub index: usize,
    pub phase: StepPhase,
    pub required_tool_id: u32,
    pub required_part_id: u32,
    #[serde(default)]
    pub doc_assets: Vec<DocAsset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct WorkflowDefinition {
    pub workflow_id: u16,
    pub target_machine_id: u32,
    pub required_qualification: String,
    pub steps: Vec<StepDefinition>,
}

impl WorkflowDefinition {
    pub fn validate(&self) -> Result<(), PrescriptionError> {
        let invalid = |msg: String| Err(PrescriptionError::InvalidWorkflow(msg));
        if self.target_machine_id == 0 {
            return invalid("target-machine-id must be > 0".into());
        }
        if self.steps.is_empty() {
            return invalid(format!("workflow {} has no steps", self.workflow_id));
        }
        let mut seen_reassembly = false;
        for (position, step) in self.steps.iter().enumerate() {
            if step.index != position {
                return invalid(format!("step at position {position} has index {}", step.index));
            }
            if step.required_tool_id == 0 || step.required_part_id == 0 {
                return invalid(format!("step {position} requires a zero tool or part id"));
            }
            match step.phase {
                StepPhase::Reassembly => seen_reassembly = true,
                StepPhase::Disassembly if seen_reassembly => {
                    return invalid(format!("disassembly step {position} follows a reassembly step"));
                }
                StepPhase::Disassembly => {}
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PrescriptionError> {
        let workflow: WorkflowDefinition = serde_json::from_str(text)
            .map_err(|e| PrescriptionError::InvalidWorkflow(format!("line {}: {e}", e.line())))?;
        workflow.validate()?;
        Ok(workflow)
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Builds a workflow whose reassembly steps mirror the disassembly steps
    /// in reverse order, with the same tool and part per step.
    pub fn with_mirrored_reassembly(
        workflow_id: u16,
        target_machine_id: u32,
        required_qualification: impl Into<String>,
        disassembly: &[(u32, u32)],
    ) -> Result<Self, PrescriptionError> {
        let forward = disassembly.iter().map(|&(tool, part)| (StepPhase::Disassembly, tool, part));
        let backward = disassembly.iter().rev().map(|&(tool, part)| (StepPhase::Reassembly, tool, part));
        let steps = forward
            .chain(backward)
            .enumerate()
            .map(|(index, (phase, tool, part))| StepDefinition {
                index,
                phase,
                required_tool_id: tool,
                required_part_id: part,
                doc_assets: Vec::new(),
            })
            .collect();
        let workflow = WorkflowDefinition {
            workflow_id,
            target_machine_id,
            required_qualification: required_qualification.into(),
            steps,
        };
        workflow.validate()?;
        Ok(workflow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    #[serde(rename = "badge-id")]
    pub badge_id: u32,
    pub name: String,
    #[serde(default)]
    pub qualifications: BTreeSet<String>,
}

impl Operator {
    pub fn new(badge_id: u32, name: impl Into<String>, qualifications: &[&str]) -> Self {
        Operator {
            badge_id,
            name: name.into(),
            qualifications: qualifications.iter().map(|q| q.to_string()).collect(),
        }
    }

    pub fn holds(&self, qualification: &str) -> bool {
        self.qualifications.contains(qualification)
    }
}

/// Badge id → operator lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OperatorDirectory {
    operators: BTreeMap<u32, Operator>,
}

impl OperatorDirectory {
    pub fn new(operators: impl IntoIterator<Item = Operator>) -> Result<Self, PrescriptionError> {
        let mut map = BTreeMap::new();
        for operator in operators {
            if operator.badge_id == 0 {
                return Err(PrescriptionError::InvalidWorkflow(format!(
                    "operator `{}` has badge id 0",
                    operator.name
                )));
            }
            map.insert(operator.badge_id, operator);
        }
        Ok(OperatorDirectory { operators: map })
    }

    pub fn get(&self, badge_id: u32) -> Option<&Operator> {
        self.operators.get(&badge_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Operator> {
        self.operators.values()
    }
}
