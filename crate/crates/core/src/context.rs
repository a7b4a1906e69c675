//! Intervention context: environment, platform and user preferences.
//!
//! Online, the context comes from the technical data server (SGDT) store.
//! Offline, only what the machine tag carries is available: its identity and
//! the last [`HISTORY_CAPACITY`] history records.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prescription::{DocAsset, MediaKind};
use crate::tag::{HistoryRecord, TagError, TagKind, TagMemory, HISTORY_CAPACITY};

const PREFERENCES_FILE: &str = "preferences.json";

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("machine {0} is not known to the technical data server")]
    UnknownMachine(u32),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("technical data store: {0}")]
    Store(String),
}

impl ContextError {
    pub fn code(&self) -> &'static str {
        match self {
            ContextError::UnknownMachine(_) => "UnknownMachine",
            ContextError::Tag(e) => e.code(),
            ContextError::Store(_) => "StoreFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Server,
    TagOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Characteristics {
    pub name: String,
    pub model: String,
    pub location: String,
}

/// A machine's full record on the technical data server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SgdtRecord {
    pub machine_id: u32,
    pub characteristics: Characteristics,
    #[serde(default)]
    pub history: Vec<HistoryRecord>,
    #[serde(default)]
    pub doc_assets: Vec<DocAsset>,
}

fn chronological_key(r: &HistoryRecord) -> (u32, u32, u32) {
    (r.start_time.0, r.end_time.0, r.intervention_id)
}

impl SgdtRecord {
    fn sort_history(&mut self) {
        self.history.sort_by_key(chronological_key);
    }

    /// Inserts every record whose intervention id is not yet present, keeping
    /// the history in chronological order. Returns how many were added.
    pub fn merge_history(&mut self, records: &[HistoryRecord]) -> usize {
        let mut known: HashSet<u32> = self.history.iter().map(|r| r.intervention_id).collect();
        let before = self.history.len();
        for record in records {
            if known.insert(record.intervention_id) {
                self.history.push(*record);
            }
        }
        self.sort_history();
        self.history.len() - before
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Preferences {
    /// Preferred documentation media, most preferred first.
    #[serde(default)]
    pub preferred_media: Vec<MediaKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Platform {
    /// Device configuration the technician is wearing, if known.
    pub configuration_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Environment {
    pub machine_id: u32,
    /// Absent when resolved from the tag alone.
    pub characteristics: Option<Characteristics>,
    pub history: Vec<HistoryRecord>,
    /// Badges of the most recent interventions, most recent first, no repeats.
    pub last_operators: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub environment: Environment,
    pub platform: Platform,
    pub preferences: Preferences,
}

/// The part of a bundle a machine tag can carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InSituView {
    pub machine_id: u32,
    pub history: Vec<HistoryRecord>,
    pub last_operators: Vec<u32>,
}

impl ContextBundle {
    pub fn in_situ_projection(&self) -> InSituView {
        let history = &self.environment.history;
        let recent = &history[history.len().saturating_sub(HISTORY_CAPACITY)..];
        InSituView {
            machine_id: self.environment.machine_id,
            history: recent.to_vec(),
            last_operators: last_operators(recent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedContext {
    pub bundle: ContextBundle,
    pub provenance: Provenance,
}

/// Who is asking and on what platform.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextRequest {
    pub operator_badge_id: u32,
    pub platform: Platform,
}

/// Distinct badges over the most recent interventions, newest first.
pub fn last_operators(history: &[HistoryRecord]) -> Vec<u32> {
    let recent = &history[history.len().saturating_sub(HISTORY_CAPACITY)..];
    let mut seen = HashSet::new();
    recent
        .iter()
        .rev()
        .map(|r| r.operator_badge_id)
        .filter(|badge| seen.insert(*badge))
        .collect()
}

#[derive(Debug, Default)]
struct StoreState {
    records: BTreeMap<u32, SgdtRecord>,
    preferences: BTreeMap<u32, Preferences>,
}

/// Technical data server stand-in: one JSON document per machine.
#[derive(Debug, Default)]
pub struct SgdtStore {
    state: RwLock<StoreState>,
    dir: Option<PathBuf>,
}

impl SgdtStore {
    pub fn in_memory(records: impl IntoIterator<Item = SgdtRecord>) -> Self {
        let store = SgdtStore::default();
        {
            let mut state = store.state.write().expect("fresh lock");
            for mut record in records {
                record.sort_history();
                state.records.insert(record.machine_id, record);
            }
        }
        store
    }

    /// Loads `<dir>/<machine-id>.json` documents and the optional
    /// `<dir>/preferences.json` (badge id → preferences). Writes go back to
    /// the same directory.
    pub fn open_dir(dir: &Path) -> Result<Self, ContextError> {
        let store_err = |path: &Path, e: &dyn std::fmt::Display| ContextError::Store(format!("{}: {e}", path.display()));
        fs::create_dir_all(dir).map_err(|e| store_err(dir, &e))?;
        let mut state = StoreState::default();
        let entries = fs::read_dir(dir).map_err(|e| store_err(dir, &e))?;
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for path in paths {
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| store_err(&path, &e))?;
            if path.file_name().and_then(|n| n.to_str()) == Some(PREFERENCES_FILE) {
                state.preferences = serde_json::from_str(&text).map_err(|e| store_err(&path, &e))?;
                continue;
            }
            let mut record: SgdtRecord = serde_json::from_str(&text).map_err(|e| store_err(&path, &e))?;
            record.sort_history();
            if state.records.insert(record.machine_id, record).is_some() {
                return Err(store_err(&path, &"duplicate machine id"));
            }
        }
        Ok(SgdtStore { state: RwLock::new(state), dir: Some(dir.to_path_buf()) })
    }

    pub fn get(&self, machine_id: u32) -> Option<SgdtRecord> {
        self.state.read().expect("sgdt lock").records.get(&machine_id).cloned()
    }

    pub fn machine_ids(&self) -> Vec<u32> {
        self.state.read().expect("sgdt lock").records.keys().copied().collect()
    }

    pub fn preferences(&self, badge_id: u32) -> Preferences {
        self.state.read().expect("sgdt lock").preferences.get(&badge_id).cloned().unwrap_or_default()
    }

    pub fn set_preferences(&self, badge_id: u32, preferences: Preferences) -> Result<(), ContextError> {
        let mut state = self.state.write().expect("sgdt lock");
        state.preferences.insert(badge_id, preferences);
        if let Some(dir) = &self.dir {
            let path = dir.join(PREFERENCES_FILE);
            let text = serde_json::to_string_pretty(&state.preferences).map_err(|e| ContextError::Store(e.to_string()))?;
            fs::write(&path, text).map_err(|e| ContextError::Store(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn upsert(&self, mut record: SgdtRecord) -> Result<(), ContextError> {
        record.sort_history();
        let mut state = self.state.write().expect("sgdt lock");
        self.persist(&record)?;
        state.records.insert(record.machine_id, record);
        Ok(())
    }

    fn persist(&self, record: &SgdtRecord) -> Result<(), ContextError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.json", record.machine_id));
            let text = serde_json::to_string_pretty(record).map_err(|e| ContextError::Store(e.to_string()))?;
            fs::write(&path, text + "\n").map_err(|e| ContextError::Store(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Merges a record set into a machine's history under the exclusive lock.
    pub fn merge(&self, machine_id: u32, records: &[HistoryRecord]) -> Result<SgdtRecord, ContextError> {
        let mut state = self.state.write().expect("sgdt lock");
        let current = state.records.get(&machine_id).ok_or(ContextError::UnknownMachine(machine_id))?;
        let mut merged = current.clone();
        if merged.merge_history(records) > 0 {
            self.persist(&merged)?;
            state.records.insert(machine_id, merged.clone());
        }
        Ok(merged)
    }
}

/// Builds the context for the machine behind `machine_tag`.
pub fn resolve(
    machine_tag: &TagMemory,
    connectivity: Connectivity,
    sgdt: &SgdtStore,
    request: &ContextRequest,
) -> Result<ResolvedContext, ContextError> {
    let identity = machine_tag.read_identity()?;
    if identity.kind != TagKind::Machine {
        return Err(TagError::WrongKind { expected: TagKind::Machine, found: identity.kind }.into());
    }
    match connectivity {
        Connectivity::Online => {
            let record = sgdt.get(identity.entity_id).ok_or(ContextError::UnknownMachine(identity.entity_id))?;
            let last_operators = last_operators(&record.history);
            Ok(ResolvedContext {
                bundle: ContextBundle {
                    environment: Environment {
                        machine_id: record.machine_id,
                        characteristics: Some(record.characteristics),
                        history: record.history,
                        last_operators,
                    },
                    platform: request.platform.clone(),
                    preferences: sgdt.preferences(request.operator_badge_id),
                },
                provenance: Provenance::Server,
            })
        }
        Connectivity::Offline => {
            let history = machine_tag.read_history()?;
            Ok(ResolvedContext {
                bundle: ContextBundle {
                    environment: Environment {
                        machine_id: identity.entity_id,
                        characteristics: None,
                        last_operators: last_operators(&history),
                        history,
                    },
                    platform: request.platform.clone(),
                    preferences: Preferences::default(),
                },
                provenance: Provenance::TagOnly,
            })
        }
    }
}

/// Pushes tag history the server does not know yet (matched by intervention
/// id) into the machine's server record.
pub fn sync_tag(machine_tag: &TagMemory, sgdt: &SgdtStore) -> Result<SgdtRecord, ContextError> {
    let history = machine_tag.read_history()?;
    let identity = machine_tag.read_identity()?;
    sgdt.merge(identity.entity_id, &history)
}
