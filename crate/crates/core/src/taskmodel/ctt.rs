use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{parse_document, structure_error, TaskModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    Abstraction,
    User,
    Interaction,
    Application,
}

/// Operator binding a task to its next sibling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemporalOperator {
    Enabling,
    EnablingWithInfo,
    Concurrent,
    Choice,
    Disabling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    VisualOut,
    AudioOut,
    AudioIn,
    TagIn,
    SelectIn,
    TextIn,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::VisualOut,
        Modality::AudioOut,
        Modality::AudioIn,
        Modality::TagIn,
        Modality::SelectIn,
        Modality::TextIn,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CttNode {
    pub name: String,
    pub category: TaskCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_operator: Option<TemporalOperator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<CttNode>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub modality_needs: BTreeSet<Modality>,
}

impl CttNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Union of all leaf needs.
    pub fn required_needs(&self) -> BTreeSet<Modality> {
        let mut needs = self.modality_needs.clone();
        for child in &self.children {
            needs.extend(child.required_needs());
        }
        needs
    }

    /// Depth-first search by task name.
    pub fn find(&self, name: &str) -> Option<&CttNode> {
        if self.name == name {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(name))
    }

    pub fn leaves(&self) -> Vec<&CttNode> {
        if self.is_leaf() {
            return vec![self];
        }
        self.children.iter().flat_map(|c| c.leaves()).collect()
    }

    pub fn validate(&self) -> Result<(), TaskModelError> {
        if self.temporal_operator.is_some() {
            return Err(structure_error(".".into(), "the root task has no next sibling".into()));
        }
        self.validate_at(String::new())
    }

    fn validate_at(&self, path: String) -> Result<(), TaskModelError> {
        let here = if path.is_empty() { ".".to_string() } else { path.clone() };
        if self.name.trim().is_empty() {
            return Err(structure_error(here, "task without a name".into()));
        }
        if !self.modality_needs.is_empty() {
            if !self.is_leaf() {
                return Err(structure_error(here, format!("`{}` has children and modality needs", self.name)));
            }
            if self.category != TaskCategory::Interaction {
                return Err(structure_error(here, format!("`{}` has modality needs but is not an interaction task", self.name)));
            }
        }
        for (i, child) in self.children.iter().enumerate() {
            let child_path = format!("{path}children[{i}]");
            let last = i + 1 == self.children.len();
            if last && child.temporal_operator.is_some() {
                return Err(structure_error(child_path, format!("last child `{}` has a temporal operator", child.name)));
            }
            child.validate_at(format!("{child_path}."))?;
        }
        Ok(())
    }
}

/// Parses and checks a task tree document.
pub fn load_task_tree(document: &str) -> Result<CttNode, TaskModelError> {
    let tree: CttNode = parse_document(document)?;
    tree.validate()?;
    Ok(tree)
}
