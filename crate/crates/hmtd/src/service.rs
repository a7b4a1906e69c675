//! The service core shared by the HTTP front end and the scenario runner.
//!
//! Every mutating call locks the target session, runs the engine on a copy,
//! appends the resulting event to the ledger and only then keeps the copy.
//! Holding the session lock across the append gives each session a total
//! order that matches the ledger order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use hmtd_core::collab::{CollabSession, Indication, IndicationPayload};
use hmtd_core::context::{self, Connectivity, ContextRequest, Platform, ResolvedContext, SgdtStore};
use hmtd_core::prescription::{
    ExpectedTag, InterventionSession, Phase, ScanOutcome, ScanSubstate, SessionId, StepDefinition,
    WorkflowDefinition,
};
use hmtd_core::tag::{HistoryRecord, TagIdentity, TagKind, TagMemory};
use hmtd_core::trace::{EventKind, Ledger, NewEvent, TraceEvent};
use hmtd_core::Minutes;
use serde::Serialize;
use tokio::sync::Notify;

use crate::clock::Clock;
use crate::error::ServiceError;
use crate::world::{Catalog, DataLayout};

/// Trace events included in an expert's context snapshot.
pub const SNAPSHOT_EVENTS: usize = 10;

#[derive(Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub clock: Clock,
    pub connectivity: Connectivity,
}

/// Session state as clients see it.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SessionView {
    #[serde(flatten)]
    pub session: InterventionSession,
    pub next_expected: Option<ExpectedTag>,
    pub current_step: Option<StepDefinition>,
}

impl SessionView {
    fn of(session: &InterventionSession) -> Self {
        SessionView {
            session: session.clone(),
            next_expected: session.next_expected(),
            current_step: session.workflow().steps.get(session.step_cursor()).cloned(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScanResponse {
    #[serde(flatten)]
    pub outcome: ScanOutcome,
    pub phase: Phase,
    pub step_cursor: usize,
    pub scan_substate: ScanSubstate,
    pub seq: u64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinalRecord {
    pub record: HistoryRecord,
    pub session: SessionView,
    /// Whether the machine record on the technical data server was updated.
    pub synced: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum BindTarget<'a> {
    MachineId(u32),
    TagFile(&'a Path),
}

/// A collaboration session and the wake-up signal for its long-polls.
#[derive(Debug)]
pub struct CollabSlot {
    session: Mutex<CollabSession>,
    pub notify: Notify,
}

impl CollabSlot {
    pub fn lock(&self) -> MutexGuard<'_, CollabSession> {
        self.session.lock().expect("collab lock")
    }
}

#[derive(Debug)]
pub struct Hmtd {
    layout: DataLayout,
    catalog: Catalog,
    ledger: Ledger,
    sgdt: SgdtStore,
    clock: Clock,
    connectivity: Mutex<Connectivity>,
    sessions: Mutex<BTreeMap<SessionId, Arc<Mutex<InterventionSession>>>>,
    collabs: Mutex<BTreeMap<u32, Arc<CollabSlot>>>,
    next_session: AtomicU32,
    next_collab: AtomicU32,
    /// Serializes read-modify-write cycles on tag files.
    tags: Mutex<()>,
}

impl Hmtd {
    /// Opens the data directory and restores every session recorded in its
    /// ledger.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let layout = DataLayout::new(&config.data_dir);
        layout.prepare()?;
        let catalog = Catalog::load(&layout)?;
        let ledger = Ledger::open(&layout.trace_log()).map_err(|e| ServiceError::Config(e.to_string()))?;
        let sgdt = SgdtStore::open_dir(&layout.sgdt_dir()).map_err(|e| ServiceError::Config(e.to_string()))?;

        let mut sessions = BTreeMap::new();
        for session_id in ledger.sessions() {
            let session =
                ledger.replay(session_id, &catalog).map_err(|e| ServiceError::Config(format!("trace replay: {e}")))?;
            sessions.insert(session_id, Arc::new(Mutex::new(session)));
        }
        let events = ledger.events();
        if let Some(last) = events.last() {
            config.clock.advance_past(last.timestamp);
        }
        let max_session = sessions.keys().map(|s| s.0).max().unwrap_or(0);
        let max_intervention = sgdt
            .machine_ids()
            .into_iter()
            .filter_map(|m| sgdt.get(m))
            .flat_map(|r| r.history.into_iter().map(|h| h.intervention_id))
            .max()
            .unwrap_or(0);
        let collabs_opened = ledger.count_kind(EventKind::AssistanceRequested) as u32;

        Ok(Hmtd {
            layout,
            catalog,
            ledger,
            sgdt,
            clock: config.clock,
            connectivity: Mutex::new(config.connectivity),
            sessions: Mutex::new(sessions),
            collabs: Mutex::new(BTreeMap::new()),
            next_session: AtomicU32::new(max_session.max(max_intervention) + 1),
            next_collab: AtomicU32::new(collabs_opened + 1),
            tags: Mutex::new(()),
        })
    }

    pub fn layout(&self) -> &DataLayout {
        &self.layout
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn sgdt(&self) -> &SgdtStore {
        &self.sgdt
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn connectivity(&self) -> Connectivity {
        *self.connectivity.lock().expect("connectivity lock")
    }

    /// Switches connectivity. Coming back online pushes every machine tag's
    /// history to the server; the machines whose record grew are returned.
    pub fn set_connectivity(&self, connectivity: Connectivity) -> Result<Vec<u32>, ServiceError> {
        let previous = std::mem::replace(&mut *self.connectivity.lock().expect("connectivity lock"), connectivity);
        if previous == connectivity || connectivity == Connectivity::Offline {
            return Ok(Vec::new());
        }
        let _tags = self.tags.lock().expect("tag lock");
        let mut grown = Vec::new();
        for machine_id in self.sgdt.machine_ids() {
            let identity = TagIdentity::new(TagKind::Machine, machine_id)?;
            let tag = match self.layout.load_tag(identity) {
                Ok(tag) => tag,
                Err(ServiceError::TagNotFound(_)) => continue,
                Err(e) => return Err(e),
            };
            let before = self.sgdt.get(machine_id).map_or(0, |r| r.history.len());
            if context::sync_tag(&tag, &self.sgdt)?.history.len() > before {
                grown.push(machine_id);
            }
        }
        Ok(grown)
    }

    pub fn workflows(&self) -> Vec<WorkflowDefinition> {
        self.catalog.workflows.values().map(|w| (**w).clone()).collect()
    }

    fn session_slot(&self, session_id: SessionId) -> Result<Arc<Mutex<InterventionSession>>, ServiceError> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(&session_id)
            .cloned()
            .ok_or(ServiceError::UnknownSession(session_id))
    }

    fn collab_slot(&self, collab_id: u32) -> Result<Arc<CollabSlot>, ServiceError> {
        self.collabs
            .lock()
            .expect("collabs lock")
            .get(&collab_id)
            .cloned()
            .ok_or(hmtd_core::collab::CollabError::UnknownSession(collab_id).into())
    }

    /// Runs `op` on a copy of the session and keeps the copy only once every
    /// event it produced is in the ledger.
    fn mutate<T>(
        &self,
        session_id: SessionId,
        op: impl FnOnce(&mut InterventionSession) -> Result<(T, Vec<NewEvent>), ServiceError>,
    ) -> Result<(T, InterventionSession, Vec<u64>), ServiceError> {
        let slot = self.session_slot(session_id)?;
        let mut guard = slot.lock().expect("session lock");
        let mut draft = guard.clone();
        let (value, events) = op(&mut draft)?;
        let seqs = self.append_all(events)?;
        *guard = draft.clone();
        Ok((value, draft, seqs))
    }

    fn append_all(&self, events: Vec<NewEvent>) -> Result<Vec<u64>, ServiceError> {
        events.into_iter().map(|e| self.ledger.append(e).map_err(ServiceError::from)).collect()
    }

    pub fn session(&self, session_id: SessionId) -> Result<SessionView, ServiceError> {
        let slot = self.session_slot(session_id)?;
        let guard = slot.lock().expect("session lock");
        Ok(SessionView::of(&guard))
    }

    pub fn sessions(&self) -> Vec<SessionView> {
        let slots: Vec<_> = self.sessions.lock().expect("sessions lock").values().cloned().collect();
        slots.iter().map(|s| SessionView::of(&s.lock().expect("session lock"))).collect()
    }

    pub fn create_session(&self, badge_id: u32, workflow_id: u16) -> Result<SessionView, ServiceError> {
        let workflow = self.catalog.workflows.get(&workflow_id).cloned().ok_or(ServiceError::UnknownWorkflow(workflow_id))?;
        let mut sessions = self.sessions.lock().expect("sessions lock");
        let session_id = SessionId(self.next_session.load(Ordering::SeqCst));
        let (session, event) =
            InterventionSession::authenticate(session_id, badge_id, &self.catalog.operators, workflow, self.clock.now())?;
        self.ledger.append(event)?;
        self.next_session.store(session_id.0 + 1, Ordering::SeqCst);
        let view = SessionView::of(&session);
        sessions.insert(session_id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn resolve_path(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.layout.root().join(path)
        }
    }

    fn load_tag_file(&self, path: &Path) -> Result<TagMemory, ServiceError> {
        let path = self.resolve_path(path);
        if !path.exists() {
            return Err(ServiceError::BadRequest(format!("no tag file {}", path.display())));
        }
        Ok(TagMemory::load(&path)?)
    }

    pub fn bind(&self, session_id: SessionId, target: BindTarget<'_>) -> Result<SessionView, ServiceError> {
        let tag = match target {
            BindTarget::MachineId(id) => self.layout.load_tag(TagIdentity::new(TagKind::Machine, id)?)?,
            BindTarget::TagFile(path) => self.load_tag_file(path)?,
        };
        let ((), session, _) = self.mutate(session_id, |s| {
            let event = s.bind_machine(&tag, self.clock.now())?;
            Ok(((), vec![event]))
        })?;
        Ok(SessionView::of(&session))
    }

    pub fn scan(&self, session_id: SessionId, tag: TagIdentity) -> Result<ScanResponse, ServiceError> {
        let (outcome, session, seqs) = self.mutate(session_id, |s| {
            let (outcome, event) = s.scan(tag, self.clock.now())?;
            Ok((outcome, vec![event]))
        })?;
        Ok(ScanResponse {
            outcome,
            phase: session.phase(),
            step_cursor: session.step_cursor(),
            scan_substate: session.scan_substate(),
            seq: seqs[0],
        })
    }

    /// Flags the part's tag defective and substitutes the replacement in the
    /// remaining reassembly steps.
    pub fn report_defect(&self, session_id: SessionId, part_id: u32, replacement_id: u32) -> Result<SessionView, ServiceError> {
        let identity = TagIdentity::new(TagKind::Part, part_id)?;
        let _tags = self.tags.lock().expect("tag lock");
        let mut part_tag = self.layout.load_tag(identity)?;
        let ((), session, _) = self.mutate(session_id, |s| {
            let event = s.report_defective(&mut part_tag, replacement_id, self.clock.now())?;
            Ok(((), vec![event]))
        })?;
        self.layout.save_tag(&part_tag)?;
        Ok(SessionView::of(&session))
    }

    pub fn complete(&self, session_id: SessionId) -> Result<FinalRecord, ServiceError> {
        self.finish(session_id, false)
    }

    pub fn abort(&self, session_id: SessionId) -> Result<FinalRecord, ServiceError> {
        self.finish(session_id, true)
    }

    fn finish(&self, session_id: SessionId, abort: bool) -> Result<FinalRecord, ServiceError> {
        let machine_id = self.session_slot(session_id)?.lock().expect("session lock").machine_id();
        let identity = TagIdentity::new(TagKind::Machine, machine_id)?;
        let _tags = self.tags.lock().expect("tag lock");
        let mut machine_tag = self.layout.load_tag(identity)?;
        let (record, session, _) = self.mutate(session_id, |s| {
            let now = self.clock.now();
            let (record, event) = if abort { s.abort(now, &mut machine_tag)? } else { s.complete(now, &mut machine_tag)? };
            Ok((record, vec![event]))
        })?;
        self.layout.save_tag(&machine_tag)?;
        let synced = self.connectivity() == Connectivity::Online && self.sgdt.get(machine_id).is_some();
        if synced {
            context::sync_tag(&machine_tag, &self.sgdt)?;
        }
        Ok(FinalRecord { record, session: SessionView::of(&session), synced })
    }

    fn context_for(&self, machine_id: u32, mode: Connectivity, badge_id: u32) -> Result<ResolvedContext, ServiceError> {
        let tag = self.layout.load_tag(TagIdentity::new(TagKind::Machine, machine_id)?)?;
        let request = ContextRequest { operator_badge_id: badge_id, platform: Platform::default() };
        Ok(context::resolve(&tag, mode, &self.sgdt, &request)?)
    }

    /// Context of a machine in the given mode, or the service's current
    /// connectivity when none is given.
    pub fn context(&self, machine_id: u32, mode: Option<Connectivity>, badge_id: Option<u32>) -> Result<ResolvedContext, ServiceError> {
        self.context_for(machine_id, mode.unwrap_or_else(|| self.connectivity()), badge_id.unwrap_or(0))
    }

    pub fn assist(&self, session_id: SessionId, expert_id: &str) -> Result<CollabSession, ServiceError> {
        let slot = self.session_slot(session_id)?;
        let guard = slot.lock().expect("session lock");
        let context = self.context_for(guard.machine_id(), self.connectivity(), guard.operator().badge_id)?;
        let recent = self.recent_events(session_id);
        let mut collabs = self.collabs.lock().expect("collabs lock");
        let collab_id = self.next_collab.load(Ordering::SeqCst);
        let (collab, event) =
            CollabSession::open(collab_id, &guard, expert_id, &self.catalog.experts, context.bundle, recent, self.clock.now())?;
        self.ledger.append(event)?;
        self.next_collab.store(collab_id + 1, Ordering::SeqCst);
        collabs.insert(collab_id, Arc::new(CollabSlot { session: Mutex::new(collab.clone()), notify: Notify::new() }));
        Ok(collab)
    }

    fn recent_events(&self, session_id: SessionId) -> Vec<TraceEvent> {
        let events = self.ledger.session_events(session_id);
        events[events.len().saturating_sub(SNAPSHOT_EVENTS)..].to_vec()
    }

    pub fn collab(&self, collab_id: u32) -> Result<CollabSession, ServiceError> {
        Ok(self.collab_slot(collab_id)?.lock().clone())
    }

    pub fn collabs(&self) -> Vec<CollabSession> {
        let slots: Vec<_> = self.collabs.lock().expect("collabs lock").values().cloned().collect();
        slots.iter().map(|s| s.lock().clone()).collect()
    }

    /// Re-takes the expert's snapshot of the intervention.
    pub fn refresh_collab(&self, collab_id: u32) -> Result<CollabSession, ServiceError> {
        let slot = self.collab_slot(collab_id)?;
        let session_id = slot.lock().session_id();
        let intervention = self.session_slot(session_id)?.lock().expect("session lock").clone();
        let context = self.context_for(intervention.machine_id(), self.connectivity(), intervention.operator().badge_id)?;
        let recent = self.recent_events(session_id);
        let mut collab = slot.lock();
        collab.refresh_snapshot(&intervention, context.bundle, recent, self.clock.now());
        Ok(collab.clone())
    }

    pub fn send_indication(&self, collab_id: u32, payload: IndicationPayload) -> Result<u64, ServiceError> {
        let slot = self.collab_slot(collab_id)?;
        let seq = {
            let mut collab = slot.lock();
            let mut draft = collab.clone();
            let (seq, event) = draft.send_indication(payload, self.clock.now())?;
            self.ledger.append(event)?;
            *collab = draft;
            seq
        };
        slot.notify.notify_waiters();
        Ok(seq)
    }

    pub fn poll(&self, collab_id: u32, after_seq: u64) -> Result<Vec<Indication>, ServiceError> {
        Ok(self.collab_slot(collab_id)?.lock().poll_indications(after_seq))
    }

    pub fn slot(&self, collab_id: u32) -> Result<Arc<CollabSlot>, ServiceError> {
        self.collab_slot(collab_id)
    }

    pub fn close_collab(&self, collab_id: u32) -> Result<CollabSession, ServiceError> {
        let slot = self.collab_slot(collab_id)?;
        let closed = {
            let mut collab = slot.lock();
            collab.close()?;
            collab.clone()
        };
        slot.notify.notify_waiters();
        Ok(closed)
    }

    pub fn part_history(&self, part_id: u32) -> Vec<TraceEvent> {
        self.ledger.part_history(part_id)
    }

    pub fn tool_usage(&self, tool_id: u32) -> Vec<TraceEvent> {
        self.ledger.tool_usage(tool_id)
    }

    pub fn session_events(&self, session_id: SessionId) -> Result<Vec<TraceEvent>, ServiceError> {
        self.session_slot(session_id)?;
        Ok(self.ledger.session_events(session_id))
    }

    pub fn replay(&self, session_id: SessionId) -> Result<InterventionSession, ServiceError> {
        Ok(self.ledger.replay(session_id, &self.catalog)?)
    }

    pub fn now(&self) -> Minutes {
        self.clock.now()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hmtd_core::prescription::{Operator, ScanResult, StepPhase};
    use hmtd_core::tag::{HistoryRecord, Outcome};

    fn world() -> (tempfile::TempDir, Hmtd) {
        let dir = tempfile::tempdir().unwrap();
        let layout = DataLayout::new(dir.path());
        layout.prepare().unwrap();
        let operators = vec![Operator::new(1001, "Alice", &["MECA-2"])];
        std::fs::write(layout.operators_file(), serde_json::to_string(&operators).unwrap()).unwrap();
        std::fs::write(layout.experts_file(), r#"[{"expert-id": "exp-1", "name": "Eve"}]"#).unwrap();
        let workflow = WorkflowDefinition::with_mirrored_reassembly(1, 42, "MECA-2", &[(100, 200)]).unwrap();
        std::fs::write(layout.workflows_dir().join("1.json"), serde_json::to_string(&workflow).unwrap()).unwrap();
        std::fs::write(
            layout.sgdt_dir().join("42.json"),
            r#"{"machine-id": 42, "characteristics": {"name": "press", "model": "P1", "location": "hall"}, "history": [
                {"intervention-id": 7, "operator-badge-id": 1001, "workflow-id": 1, "start-time": 5, "end-time": 9,
                 "outcome": "Completed", "defect-count": 0, "step-count": 2}]}"#,
        )
        .unwrap();
        layout.save_tag(&TagMemory::init(TagIdentity::machine(42))).unwrap();
        layout.save_tag(&TagMemory::init(TagIdentity::part(200))).unwrap();
        let hmtd = Hmtd::open(ServiceConfig {
            data_dir: dir.path().into(),
            clock: Clock::logical(Minutes(1000), 1),
            connectivity: Connectivity::Online,
        })
        .unwrap();
        (dir, hmtd)
    }

    #[test]
    fn session_ids_follow_known_interventions() {
        let (_dir, hmtd) = world();
        let view = hmtd.create_session(1001, 1).unwrap();
        assert_eq!(view.session.session_id(), SessionId(8));
        assert_eq!(hmtd.create_session(1001, 1).unwrap().session.session_id(), SessionId(9));
        assert_eq!(hmtd.create_session(1001, 9).unwrap_err().code(), "UnknownWorkflow");
    }

    #[test]
    fn full_run_writes_tag_and_server() {
        let (_dir, hmtd) = world();
        let id = hmtd.create_session(1001, 1).unwrap().session.session_id();
        hmtd.bind(id, BindTarget::MachineId(42)).unwrap();
        hmtd.report_defect(id, 200, 250).unwrap();
        for tag in [TagIdentity::tool(100), TagIdentity::part(200), TagIdentity::tool(100), TagIdentity::part(250)] {
            let response = hmtd.scan(id, tag).unwrap();
            assert_ne!(response.outcome.result, ScanResult::Rejected, "{tag}");
        }
        let done = hmtd.complete(id).unwrap();
        assert_eq!(done.record.outcome, Outcome::CompletedWithReplacement);
        assert!(done.synced);
        let tag = hmtd.layout().load_tag(TagIdentity::machine(42)).unwrap();
        assert_eq!(tag.read_history().unwrap(), vec![done.record]);
        let server: Vec<HistoryRecord> = hmtd.sgdt().get(42).unwrap().history;
        assert_eq!(server.len(), 2);
        assert!(hmtd.layout().load_tag(TagIdentity::part(200)).unwrap().is_defective().unwrap());
        assert_eq!(hmtd.replay(id).unwrap(), done.session.session);
    }

    #[test]
    fn failed_operation_leaves_session_and_ledger_alone() {
        let (_dir, hmtd) = world();
        let id = hmtd.create_session(1001, 1).unwrap().session.session_id();
        let before = hmtd.session(id).unwrap().session;
        assert_eq!(hmtd.complete(id).unwrap_err().code(), "WrongPhase");
        assert_eq!(hmtd.scan(id, TagIdentity::tool(100)).unwrap_err().code(), "WrongPhase");
        assert_eq!(hmtd.session(id).unwrap().session, before);
        assert_eq!(hmtd.ledger().len(), 1);
    }

    #[test]
    fn assistance_and_indications() {
        let (_dir, hmtd) = world();
        let id = hmtd.create_session(1001, 1).unwrap().session.session_id();
        assert_eq!(hmtd.assist(id, "exp-1").unwrap_err().code(), "WrongPhase");
        hmtd.bind(id, BindTarget::MachineId(42)).unwrap();
        hmtd.scan(id, TagIdentity::tool(100)).unwrap();
        let collab = hmtd.assist(id, "exp-1").unwrap();
        assert_eq!(collab.collab_id(), 1);
        assert_eq!(collab.snapshot().step_cursor, 0);
        assert_eq!(collab.snapshot().context.environment.history.len(), 1);
        assert_eq!(hmtd.assist(id, "nobody").unwrap_err().code(), "ExpertUnavailable");
        let seq = hmtd.send_indication(1, IndicationPayload::Textual { text: "tighten the left bolt".into() }).unwrap();
        assert_eq!(seq, 1);
        assert_eq!(hmtd.poll(1, 0).unwrap().len(), 1);
        hmtd.close_collab(1).unwrap();
        let err = hmtd.send_indication(1, IndicationPayload::Textual { text: "again".into() }).unwrap_err();
        assert_eq!(err.code(), "SessionClosed");
        assert_eq!(hmtd.poll(2, 0).unwrap_err().status(), 404);
    }

    #[test]
    fn reopen_restores_sessions_and_counters() {
        let (dir, hmtd) = world();
        let id = hmtd.create_session(1001, 1).unwrap().session.session_id();
        hmtd.bind(id, BindTarget::MachineId(42)).unwrap();
        hmtd.scan(id, TagIdentity::tool(100)).unwrap();
        let live = hmtd.session(id).unwrap().session;
        drop(hmtd);
        let again = Hmtd::open(ServiceConfig {
            data_dir: dir.path().into(),
            clock: Clock::logical(Minutes(0), 1),
            connectivity: Connectivity::Online,
        })
        .unwrap();
        assert_eq!(again.session(id).unwrap().session, live);
        assert!(again.now().0 > 1000);
        assert_eq!(again.create_session(1001, 1).unwrap().session.session_id(), SessionId(id.0 + 1));
        let step = &again.session(id).unwrap().current_step.unwrap();
        assert_eq!(step.phase, StepPhase::Disassembly);
    }
}
