//! Append-only traceability ledger.
//!
//! On disk the ledger is a single file of frames:
//!
//! ```text
//! u32 BE payload length | payload (UTF-8 JSON TraceEvent) | u32 BE CRC-32 of payload
//! ```
//!
//! Frames are written and synced one at a time, so a crash can at worst
//! leave one torn frame at the tail. Opening the ledger drops such a tail.
//! Per-part, per-tool and per-session indices are rebuilt in memory from a
//! full scan at open.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prescription::{InterventionSession, Operator, SessionId, WorkflowDefinition};
use crate::time::Minutes;

const FRAME_OVERHEAD: usize = 8;
const MAX_PAYLOAD: usize = 64 * 1024;
pub const MAX_DETAIL_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    OperatorAuthenticated,
    InterventionStarted,
    ToolValidated,
    StepCompleted,
    ScanRejected,
    PartReplaced,
    AssistanceRequested,
    IndicationSent,
    InterventionCompleted,
    InterventionAborted,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// An event before the ledger has assigned it a sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct NewEvent {
    pub timestamp: Minutes,
    pub session_id: SessionId,
    pub kind: EventKind,
    pub operator_badge_id: u32,
    pub machine_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow_id: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_part_id: Option<u32>,
    #[serde(default)]
    pub detail: String,
}

impl NewEvent {
    pub fn new(kind: EventKind, timestamp: Minutes, session_id: SessionId, operator_badge_id: u32, machine_id: u32) -> Self {
        NewEvent {
            timestamp,
            session_id,
            kind,
            operator_badge_id,
            machine_id,
            workflow_id: None,
            tool_id: None,
            part_id: None,
            replacement_part_id: None,
            detail: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        let invalid = |why: &str| Err(LedgerError::InvalidEvent(format!("{}: {why}", self.kind)));
        if self.session_id.0 == 0 || self.operator_badge_id == 0 || self.machine_id == 0 {
            return invalid("session, operator and machine ids must be > 0");
        }
        if self.detail.len() > MAX_DETAIL_LEN {
            return invalid("detail too long");
        }
        match self.kind {
            EventKind::OperatorAuthenticated if self.workflow_id.is_none() => invalid("workflow-id required"),
            EventKind::ToolValidated if self.tool_id.is_none() => invalid("tool-id required"),
            EventKind::StepCompleted if self.part_id.is_none() => invalid("part-id required"),
            EventKind::PartReplaced if self.part_id.is_none() || self.replacement_part_id.is_none() => {
                invalid("part-id and replacement-part-id required")
            }
            _ => Ok(()),
        }
    }

    fn with_seq(self, seq: u64) -> TraceEvent {
        TraceEvent {
            seq,
            timestamp: self.timestamp,
            session_id: self.session_id,
            kind: self.kind,
            operator_badge_id: self.operator_badge_id,
            machine_id: self.machine_id,
            workflow_id: self.workflow_id,
            tool_id: self.tool_id,
            part_id: self.part_id,
            replacement_part_id: self.replacement_part_id,
            detail: self.detail,
        }
    }
}

/// One immutable ledger entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TraceEvent {
    pub seq: u64,
    pub timestamp: Minutes,
    pub session_id: SessionId,
    pub kind: EventKind,
    pub operator_badge_id: u32,
    pub machine_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow_id: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_part_id: Option<u32>,
    #[serde(default)]
    pub detail: String,
}

impl TraceEvent {
    /// True when the event concerns `part_id`, on either side of a replacement.
    pub fn touches_part(&self, part_id: u32) -> bool {
        self.part_id == Some(part_id) || self.replacement_part_id == Some(part_id)
    }

    pub fn touches_tool(&self, tool_id: u32) -> bool {
        self.tool_id == Some(tool_id)
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("ledger storage failure: {0}")]
    StorageFailure(String),
    #[error("ledger file {path} is corrupt at offset {offset}: {reason}")]
    Corrupt { path: PathBuf, offset: u64, reason: String },
}

impl LedgerError {
    pub fn code(&self) -> &'static str {
        match self {
            LedgerError::InvalidEvent(_) => "InvalidEvent",
            LedgerError::StorageFailure(_) => "StorageFailure",
            LedgerError::Corrupt { .. } => "CorruptLedger",
        }
    }
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::StorageFailure(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("no events recorded for session {0}")]
    UnknownSession(SessionId),
    #[error("event {seq} ({kind}) cannot be replayed: {reason}")]
    Inconsistent { seq: u64, kind: EventKind, reason: String },
    #[error("replay catalog has no {0}")]
    MissingCatalogEntry(String),
}

impl ReplayError {
    pub(crate) fn inconsistent(event: &TraceEvent, reason: &str) -> Self {
        ReplayError::Inconsistent { seq: event.seq, kind: event.kind, reason: reason.to_string() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ReplayError::UnknownSession(_) => "UnknownSession",
            ReplayError::Inconsistent { .. } => "InconsistentLog",
            ReplayError::MissingCatalogEntry(_) => "MissingCatalogEntry",
        }
    }
}

/// Reference data a replay needs that events only carry by id.
pub trait ReplayCatalog {
    fn operator(&self, badge_id: u32) -> Option<Operator>;
    fn workflow(&self, workflow_id: u16) -> Option<WorkflowDefinition>;
}

/// Folds a session's events (ascending seq) back into its state.
pub fn replay_events(events: &[TraceEvent], catalog: &dyn ReplayCatalog) -> Result<InterventionSession, ReplayError> {
    let (first, rest) = events.split_first().ok_or(ReplayError::UnknownSession(SessionId(0)))?;
    let workflow_id = first
        .workflow_id
        .ok_or_else(|| ReplayError::inconsistent(first, "authentication without workflow id"))?;
    let operator = catalog
        .operator(first.operator_badge_id)
        .ok_or_else(|| ReplayError::MissingCatalogEntry(format!("operator {}", first.operator_badge_id)))?;
    let workflow = catalog
        .workflow(workflow_id)
        .ok_or_else(|| ReplayError::MissingCatalogEntry(format!("workflow {workflow_id}")))?;
    let mut session = InterventionSession::replay_start(first, operator, workflow)?;
    for event in rest {
        if event.session_id != first.session_id {
            return Err(ReplayError::inconsistent(event, "event belongs to another session"));
        }
        session.replay_apply(event)?;
    }
    Ok(session)
}

#[derive(Debug, Default)]
struct LedgerState {
    events: Vec<TraceEvent>,
    by_part: HashMap<u32, Vec<usize>>,
    by_tool: HashMap<u32, Vec<usize>>,
    by_session: HashMap<SessionId, Vec<usize>>,
    file: Option<File>,
}

impl LedgerState {
    fn index(&mut self, event: TraceEvent) {
        let position = self.events.len();
        if let Some(part) = event.part_id {
            self.by_part.entry(part).or_default().push(position);
        }
        if let Some(part) = event.replacement_part_id.filter(|p| Some(*p) != event.part_id) {
            self.by_part.entry(part).or_default().push(position);
        }
        if let Some(tool) = event.tool_id {
            self.by_tool.entry(tool).or_default().push(position);
        }
        self.by_session.entry(event.session_id).or_default().push(position);
        self.events.push(event);
    }

    fn collect(&self, positions: Option<&Vec<usize>>) -> Vec<TraceEvent> {
        positions
            .map(|ps| ps.iter().map(|&i| self.events[i].clone()).collect())
            .unwrap_or_default()
    }
}

/// The traceability ledger. Appends are serialized; queries run against a
/// consistent prefix.
#[derive(Debug)]
pub struct Ledger {
    state: RwLock<LedgerState>,
    path: Option<PathBuf>,
}

/// Result of scanning a ledger file.
#[derive(Debug)]
pub struct ScanReport {
    pub events: Vec<TraceEvent>,
    /// Octet length of the valid prefix.
    pub valid_len: u64,
    /// Octets after the valid prefix (a torn final frame).
    pub torn_tail: u64,
}

pub fn encode_frame(event: &TraceEvent) -> Result<Vec<u8>, LedgerError> {
    let payload = serde_json::to_vec(event).map_err(|e| LedgerError::InvalidEvent(e.to_string()))?;
    if payload.len() > MAX_PAYLOAD {
        return Err(LedgerError::InvalidEvent("encoded event too large".into()));
    }
    let mut frame = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame.extend_from_slice(&crc32fast::hash(&payload).to_be_bytes());
    Ok(frame)
}

/// Decodes every complete frame of `data`. A bad or incomplete final frame is
/// reported as a torn tail; a bad frame followed by more data is corruption.
pub fn scan_frames(data: &[u8], path: &Path) -> Result<ScanReport, LedgerError> {
    let mut events = Vec::new();
    let mut offset = 0usize;
    let corrupt = |offset: usize, reason: String| LedgerError::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    while offset < data.len() {
        let rest = &data[offset..];
        if rest.len() < 4 {
            break;
        }
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 octets")) as usize;
        if len > MAX_PAYLOAD {
            if offset + FRAME_OVERHEAD + len.min(rest.len()) >= data.len() {
                break;
            }
            return Err(corrupt(offset, format!("frame length {len} exceeds limit")));
        }
        let frame_len = len + FRAME_OVERHEAD;
        if rest.len() < frame_len {
            break;
        }
        let payload = &rest[4..4 + len];
        let stored = u32::from_be_bytes(rest[4 + len..frame_len].try_into().expect("4 octets"));
        let is_last = offset + frame_len == data.len();
        if crc32fast::hash(payload) != stored {
            if is_last {
                break;
            }
            return Err(corrupt(offset, "frame crc mismatch".into()));
        }
        let event: TraceEvent =
            serde_json::from_slice(payload).map_err(|e| corrupt(offset, format!("undecodable event: {e}")))?;
        let expected_seq = events.len() as u64 + 1;
        if event.seq != expected_seq {
            return Err(corrupt(offset, format!("sequence gap: expected {expected_seq}, found {}", event.seq)));
        }
        events.push(event);
        offset += frame_len;
    }
    Ok(ScanReport { events, valid_len: offset as u64, torn_tail: (data.len() - offset) as u64 })
}

/// Reads the readable prefix of a ledger file without modifying it.
pub fn read_log(path: &Path) -> Result<ScanReport, LedgerError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    scan_frames(&data, path)
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger { state: RwLock::new(LedgerState::default()), path: None }
    }

    /// Opens (or creates) a file-backed ledger and rebuilds its indices.
    /// A torn final frame is truncated away.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let report = scan_frames(&data, path)?;
        if report.torn_tail > 0 {
            file.set_len(report.valid_len)?;
            file.sync_all()?;
        }
        let mut state = LedgerState::default();
        for event in report.events {
            state.index(event);
        }
        state.file = Some(file);
        Ok(Ledger { state: RwLock::new(state), path: Some(path.to_path_buf()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, LedgerState> {
        self.state.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Appends an event; the frame is synced to disk before the sequence
    /// number is returned.
    pub fn append(&self, event: NewEvent) -> Result<u64, LedgerError> {
        event.validate()?;
        let mut state = self.state.write().unwrap_or_else(|p| p.into_inner());
        let seq = state.events.len() as u64 + 1;
        let event = event.with_seq(seq);
        if let Some(file) = state.file.as_mut() {
            let frame = encode_frame(&event)?;
            file.write_all(&frame)?;
            file.sync_data()?;
        }
        state.index(event);
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.read().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.read().events.clone()
    }

    /// The last `n` events, ascending seq.
    pub fn tail(&self, n: usize) -> Vec<TraceEvent> {
        let state = self.read();
        let start = state.events.len().saturating_sub(n);
        state.events[start..].to_vec()
    }

    pub fn part_history(&self, part_id: u32) -> Vec<TraceEvent> {
        let state = self.read();
        state.collect(state.by_part.get(&part_id))
    }

    pub fn tool_usage(&self, tool_id: u32) -> Vec<TraceEvent> {
        let state = self.read();
        state.collect(state.by_tool.get(&tool_id))
    }

    pub fn session_events(&self, session_id: SessionId) -> Vec<TraceEvent> {
        let state = self.read();
        state.collect(state.by_session.get(&session_id))
    }

    /// Session ids in order of first appearance.
    pub fn sessions(&self) -> Vec<SessionId> {
        let state = self.read();
        let mut ids: Vec<(usize, SessionId)> =
            state.by_session.iter().map(|(id, positions)| (positions[0], *id)).collect();
        ids.sort();
        ids.into_iter().map(|(_, id)| id).collect()
    }

    pub fn count_kind(&self, kind: EventKind) -> usize {
        self.read().events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn replay(&self, session_id: SessionId, catalog: &dyn ReplayCatalog) -> Result<InterventionSession, ReplayError> {
        let events = self.session_events(session_id);
        if events.is_empty() {
            return Err(ReplayError::UnknownSession(session_id));
        }
        replay_events(&events, catalog)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(kind: EventKind) -> NewEvent {
        let mut e = NewEvent::new(kind, Minutes(5), SessionId(1), 1001, 42);
        match kind {
            EventKind::OperatorAuthenticated => e.workflow_id = Some(1),
            EventKind::ToolValidated => e.tool_id = Some(100),
            EventKind::StepCompleted => e.part_id = Some(200),
            EventKind::PartReplaced => {
                e.part_id = Some(200);
                e.replacement_part_id = Some(250);
            }
            _ => {}
        }
        e
    }

    #[test]
    fn sequence_starts_at_one() {
        let ledger = Ledger::in_memory();
        assert_eq!(ledger.append(event(EventKind::OperatorAuthenticated)).unwrap(), 1);
        assert_eq!(ledger.append(event(EventKind::InterventionStarted)).unwrap(), 2);
    }

    #[test]
    fn kind_specific_fields_are_required() {
        let ledger = Ledger::in_memory();
        let mut e = event(EventKind::ToolValidated);
        e.tool_id = None;
        assert!(matches!(ledger.append(e), Err(LedgerError::InvalidEvent(_))));
        let mut e = event(EventKind::PartReplaced);
        e.replacement_part_id = None;
        assert!(matches!(ledger.append(e), Err(LedgerError::InvalidEvent(_))));
        let mut e = event(EventKind::ScanRejected);
        e.detail = "x".repeat(MAX_DETAIL_LEN + 1);
        assert!(ledger.append(e).is_err());
        assert!(ledger.is_empty());
    }

    #[test]
    fn queries_filter_by_part_and_tool() {
        let ledger = Ledger::in_memory();
        ledger.append(event(EventKind::ToolValidated)).unwrap();
        ledger.append(event(EventKind::StepCompleted)).unwrap();
        ledger.append(event(EventKind::PartReplaced)).unwrap();
        assert_eq!(ledger.part_history(200).len(), 2);
        assert_eq!(ledger.part_history(250).len(), 1);
        assert_eq!(ledger.tool_usage(100).len(), 1);
        assert!(ledger.part_history(999).is_empty());
        assert!(ledger.tool_usage(999).is_empty());
    }

    #[test]
    fn file_ledger_reopens_with_same_events() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.log");
        {
            let ledger = Ledger::open(&path).unwrap();
            ledger.append(event(EventKind::OperatorAuthenticated)).unwrap();
            ledger.append(event(EventKind::ToolValidated)).unwrap();
        }
        let ledger = Ledger::open(&path).unwrap();
        assert_eq!(ledger.len(), 2);
        assert_eq!(ledger.tool_usage(100).len(), 1);
        assert_eq!(ledger.append(event(EventKind::StepCompleted)).unwrap(), 3);
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.log");
        {
            let ledger = Ledger::open(&path).unwrap();
            ledger.append(event(EventKind::OperatorAuthenticated)).unwrap();
            ledger.append(event(EventKind::InterventionStarted)).unwrap();
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let file = OpenOptions::new().write(true).open(&path).unwrap();
        file.set_len(full - 3).unwrap();
        drop(file);
        let ledger = Ledger::open(&path).unwrap();
        assert_eq!(ledger.len(), 1);
        assert!(std::fs::metadata(&path).unwrap().len() < full - 3);
        assert_eq!(ledger.append(event(EventKind::InterventionStarted)).unwrap(), 2);
        assert_eq!(read_log(&path).unwrap().events.len(), 2);
    }

    #[test]
    fn mid_file_corruption_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.log");
        {
            let ledger = Ledger::open(&path).unwrap();
            ledger.append(event(EventKind::OperatorAuthenticated)).unwrap();
            ledger.append(event(EventKind::InterventionStarted)).unwrap();
        }
        let mut data = std::fs::read(&path).unwrap();
        data[6] ^= 0x20;
        std::fs::write(&path, &data).unwrap();
        assert!(matches!(Ledger::open(&path), Err(LedgerError::Corrupt { .. })));
    }

    #[test]
    fn sessions_in_first_appearance_order() {
        let ledger = Ledger::in_memory();
        for id in [3, 1, 3, 2] {
            let mut e = event(EventKind::InterventionStarted);
            e.session_id = SessionId(id);
            ledger.append(e).unwrap();
        }
        assert_eq!(ledger.sessions(), vec![SessionId(3), SessionId(1), SessionId(2)]);
        assert_eq!(ledger.session_events(SessionId(3)).len(), 2);
    }
}
