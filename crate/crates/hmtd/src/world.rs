//! Data directory layout and the reference data loaded from it.
//!
//! ```text
//! DIR/trace.log          traceability ledger
//! DIR/tags/*.tag         tag snapshots, <kind>-<entity-id>.tag
//! DIR/sgdt/*.json        technical data server records, <machine-id>.json
//! DIR/workflows/*.json   workflow definitions
//! DIR/operators.json     operator directory (badge id, name, qualifications)
//! DIR/experts.json       remote experts
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hmtd_core::collab::{Expert, ExpertDirectory};
use hmtd_core::prescription::{Operator, OperatorDirectory, WorkflowDefinition};
use hmtd_core::tag::{TagIdentity, TagMemory};
use hmtd_core::trace::ReplayCatalog;

use crate::error::ServiceError;

#[derive(Debug, Clone)]
pub struct DataLayout {
    root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trace_log(&self) -> PathBuf {
        self.root.join("trace.log")
    }

    pub fn tags_dir(&self) -> PathBuf {
        self.root.join("tags")
    }

    pub fn sgdt_dir(&self) -> PathBuf {
        self.root.join("sgdt")
    }

    pub fn workflows_dir(&self) -> PathBuf {
        self.root.join("workflows")
    }

    pub fn operators_file(&self) -> PathBuf {
        self.root.join("operators.json")
    }

    pub fn experts_file(&self) -> PathBuf {
        self.root.join("experts.json")
    }

    pub fn tag_path(&self, identity: TagIdentity) -> PathBuf {
        self.tags_dir().join(identity.file_name())
    }

    /// Creates the directory tree and checks that it accepts writes.
    pub fn prepare(&self) -> Result<(), ServiceError> {
        let unwritable = |e: std::io::Error| ServiceError::DataDirUnwritable(format!("{}: {e}", self.root.display()));
        for dir in [self.root.clone(), self.tags_dir(), self.sgdt_dir(), self.workflows_dir()] {
            fs::create_dir_all(&dir).map_err(unwritable)?;
        }
        let probe = self.root.join(".write-probe");
        fs::write(&probe, b"ok").map_err(unwritable)?;
        fs::remove_file(&probe).map_err(unwritable)?;
        Ok(())
    }

    pub fn load_tag(&self, identity: TagIdentity) -> Result<TagMemory, ServiceError> {
        let path = self.tag_path(identity);
        if !path.exists() {
            return Err(ServiceError::TagNotFound(identity));
        }
        Ok(TagMemory::load(&path)?)
    }

    pub fn save_tag(&self, tag: &TagMemory) -> Result<PathBuf, ServiceError> {
        Ok(tag.save_in(&self.tags_dir())?)
    }

    /// Copies a world fixture directory into this data directory. Files that
    /// already exist are kept.
    pub fn seed_from(&self, world: &Path) -> Result<(), ServiceError> {
        self.prepare()?;
        copy_missing(world, &self.root)
    }
}

fn copy_missing(from: &Path, to: &Path) -> Result<(), ServiceError> {
    let cfg = |e: std::io::Error, p: &Path| ServiceError::Config(format!("{}: {e}", p.display()));
    fs::create_dir_all(to).map_err(|e| cfg(e, to))?;
    let mut entries: Vec<_> = fs::read_dir(from).map_err(|e| cfg(e, from))?.filter_map(Result::ok).collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name();
        if name == "trace.log" {
            continue;
        }
        let source = entry.path();
        let target = to.join(&name);
        if source.is_dir() {
            copy_missing(&source, &target)?;
        } else if !target.exists() {
            fs::copy(&source, &target).map_err(|e| cfg(e, &source))?;
        }
    }
    Ok(())
}

/// Operators, experts and workflows of a data directory.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub operators: OperatorDirectory,
    pub experts: ExpertDirectory,
    pub workflows: BTreeMap<u16, Arc<WorkflowDefinition>>,
}

impl Catalog {
    pub fn load(layout: &DataLayout) -> Result<Self, ServiceError> {
        let read_json = |path: &Path| -> Result<Option<String>, ServiceError> {
            match fs::read_to_string(path) {
                Ok(text) => Ok(Some(text)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(ServiceError::Config(format!("{}: {e}", path.display()))),
            }
        };
        let parse_err = |path: &Path, e: serde_json::Error| ServiceError::Config(format!("{}: {e}", path.display()));

        let operators_path = layout.operators_file();
        let operators: Vec<Operator> = match read_json(&operators_path)? {
            Some(text) => serde_json::from_str(&text).map_err(|e| parse_err(&operators_path, e))?,
            None => Vec::new(),
        };
        let operators = OperatorDirectory::new(operators).map_err(|e| ServiceError::Config(e.to_string()))?;

        let experts_path = layout.experts_file();
        let experts: Vec<Expert> = match read_json(&experts_path)? {
            Some(text) => serde_json::from_str(&text).map_err(|e| parse_err(&experts_path, e))?,
            None => Vec::new(),
        };

        let mut workflows = BTreeMap::new();
        let dir = layout.workflows_dir();
        if dir.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("json"))
                .collect();
            paths.sort();
            for path in paths {
                let text = read_json(&path)?.unwrap_or_default();
                let workflow = WorkflowDefinition::from_json(&text)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
                if workflows.insert(workflow.workflow_id, Arc::new(workflow)).is_some() {
                    return Err(ServiceError::Config(format!("{}: duplicate workflow id", path.display())));
                }
            }
        }
        Ok(Catalog { operators, experts: ExpertDirectory::new(experts), workflows })
    }
}

impl ReplayCatalog for Catalog {
    fn operator(&self, badge_id: u32) -> Option<Operator> {
        self.operators.get(badge_id).cloned()
    }

    fn workflow(&self, workflow_id: u16) -> Option<WorkflowDefinition> {
        self.workflows.get(&workflow_id).map(|w| (**w).clone())
    }
}
