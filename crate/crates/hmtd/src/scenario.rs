//! Scripted interventions run against a data directory under a logical
//! clock, producing a reproducible text transcript.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hmtd_core::collab::IndicationPayload;
use hmtd_core::context::Connectivity;
use hmtd_core::prescription::{ScanOutcome, ScanResult, SessionId};
use hmtd_core::tag::{TagIdentity, TagKind};
use hmtd_core::trace::{EventKind, TraceEvent};
use hmtd_core::Minutes;
use serde::Deserialize;
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::error::ServiceError;
use crate::service::{BindTarget, Hmtd, ServiceConfig};
use crate::world::DataLayout;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", rename_all_fields = "kebab-case", deny_unknown_fields)]
pub enum Action {
    Authenticate { session: String, badge_id: u32, workflow_id: u16 },
    BindMachine { session: String, machine_id: Option<u32>, machine_tag_file: Option<PathBuf> },
    Scan { session: String, kind: TagKind, tag_id: u32 },
    ReportDefect { session: String, part_id: u32, replacement_id: u32 },
    RequestAssistance { session: String, collab: String, expert_id: String },
    SendIndication { collab: String, indication: IndicationPayload },
    PollIndications { collab: String, after: u64 },
    CloseAssistance { collab: String },
    ResolveContext { machine_id: u32, mode: Option<Connectivity> },
    Complete { session: String },
    Abort { session: String },
    SetConnectivity { mode: Connectivity },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScriptStep {
    #[serde(flatten)]
    pub action: Action,
    /// Result code the step must produce: `ok`, a scan result such as
    /// `Rejected:WrongTool`, or an error code. Without it the step only has
    /// to succeed; a rejected scan counts as success.
    pub expect: Option<String>,
    /// Line of the step in the script document.
    #[serde(skip)]
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScript {
    pub name: String,
    pub clock_start: Minutes,
    pub clock_step: u32,
    pub connectivity: Connectivity,
    pub actions: Vec<ScriptStep>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RawScript<'a> {
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    description: String,
    clock_start: Minutes,
    #[serde(default = "default_step")]
    clock_step: u32,
    #[serde(default = "default_connectivity")]
    connectivity: Connectivity,
    #[serde(borrow, default)]
    actions: Vec<&'a RawValue>,
}

fn default_step() -> u32 {
    1
}

fn default_connectivity() -> Connectivity {
    Connectivity::Online
}

fn line_of(text: &str, fragment: &str) -> usize {
    let offset = (fragment.as_ptr() as usize).saturating_sub(text.as_ptr() as usize).min(text.len());
    text[..offset].matches('\n').count() + 1
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawScript<'_> = serde_path_to_error::deserialize(de)
            .map_err(|e| ServiceError::Config(format!("scenario: {} at {}", e.inner(), e.path())))?;
        let mut actions = Vec::with_capacity(raw.actions.len());
        for (i, value) in raw.actions.iter().enumerate() {
            let line = line_of(text, value.get());
            let de = &mut serde_json::Deserializer::from_str(value.get());
            let mut step: ScriptStep = serde_path_to_error::deserialize(de)
                .map_err(|e| ServiceError::Config(format!("scenario action {} (line {line}): {}", i + 1, e.inner())))?;
            step.line = line;
            actions.push(step);
        }
        let script = ScenarioScript {
            name: raw.name,
            clock_start: raw.clock_start,
            clock_step: raw.clock_step,
            connectivity: raw.connectivity,
            actions,
        };
        script.check_references()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every session or collab alias must be introduced before it is used.
    fn check_references(&self) -> Result<(), ServiceError> {
        let mut sessions = BTreeSet::new();
        let mut collabs = BTreeSet::new();
        for (i, step) in self.actions.iter().enumerate() {
            let unresolved = |alias: &str| {
                ServiceError::Config(format!("scenario action {} (line {}): unknown alias `{alias}`", i + 1, step.line))
            };
            match &step.action {
                Action::Authenticate { session, .. } => {
                    sessions.insert(session.as_str());
                }
                Action::RequestAssistance { session, collab, .. } => {
                    if !sessions.contains(session.as_str()) {
                        return Err(unresolved(session));
                    }
                    collabs.insert(collab.as_str());
                }
                Action::BindMachine { session, .. }
                | Action::Scan { session, .. }
                | Action::ReportDefect { session, .. }
                | Action::Complete { session }
                | Action::Abort { session } => {
                    if !sessions.contains(session.as_str()) {
                        return Err(unresolved(session));
                    }
                }
                Action::SendIndication { collab, .. }
                | Action::PollIndications { collab, .. }
                | Action::CloseAssistance { collab } => {
                    if !collabs.contains(collab.as_str()) {
                        return Err(unresolved(collab));
                    }
                }
                Action::ResolveContext { .. } | Action::SetConnectivity { .. } => {}
            }
        }
        Ok(())
    }
}

/// The first step whose result differed from the script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deviation {
    pub step: usize,
    pub line: usize,
    pub expected: String,
    pub actual: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub text: String,
    pub deviation: Option<Deviation>,
    pub digest: String,
}

/// SHA-256 over the ledger's events, one JSON document per line.
pub fn ledger_digest(events: &[TraceEvent]) -> String {
    let mut hasher = Sha256::new();
    for event in events {
        hasher.update(serde_json::to_string(event).expect("events serialize"));
        hasher.update(b"\n");
    }
    format!("sha256:{}", hex::encode(hasher.finalize()))
}

fn describe_outcome(outcome: &ScanOutcome) -> String {
    let mut text = match (outcome.result, outcome.reason) {
        (ScanResult::Rejected, Some(reason)) => format!("Rejected:{}", reason.as_str()),
        (ScanResult::ToolAccepted, _) => "ToolAccepted".into(),
        (ScanResult::PartAcceptedStepComplete, _) => "PartAccepted-StepComplete".into(),
        (ScanResult::Rejected, None) => "Rejected".into(),
    };
    match outcome.next_expected {
        Some(next) => write!(text, ", next {next}").expect("string write"),
        None => text.push_str(", all steps validated"),
    }
    text
}

fn result_code(outcome: &ScanOutcome) -> String {
    match outcome.reason {
        Some(reason) => format!("Rejected:{}", reason.as_str()),
        None if outcome.result == ScanResult::ToolAccepted => "ToolAccepted".into(),
        None => "PartAccepted-StepComplete".into(),
    }
}

fn mode_name(mode: Connectivity) -> &'static str {
    match mode {
        Connectivity::Online => "online",
        Connectivity::Offline => "offline",
    }
}

struct Runner<'a> {
    hmtd: &'a Hmtd,
    sessions: HashMap<String, SessionId>,
    collabs: HashMap<String, u32>,
    machines: BTreeSet<u32>,
}

impl Runner<'_> {
    fn session(&self, alias: &str) -> SessionId {
        self.sessions[alias]
    }

    fn collab(&self, alias: &str) -> u32 {
        self.collabs[alias]
    }

    /// Runs one action, returning its result code and a description.
    fn step(&mut self, action: &Action) -> Result<(String, String), ServiceError> {
        let ok = |text: String| Ok(("ok".to_string(), text));
        match action {
            Action::Authenticate { session, badge_id, workflow_id } => {
                let view = self.hmtd.create_session(*badge_id, *workflow_id)?;
                let id = view.session.session_id();
                self.sessions.insert(session.clone(), id);
                ok(format!("{session} = session {id} for {}, {:?}", view.session.operator().name, view.session.phase()))
            }
            Action::BindMachine { session, machine_id, machine_tag_file } => {
                let target = match (machine_id, machine_tag_file) {
                    (Some(id), None) => BindTarget::MachineId(*id),
                    (None, Some(path)) => BindTarget::TagFile(path),
                    _ => return Err(ServiceError::BadRequest("give exactly one of machine-id or machine-tag-file".into())),
                };
                let view = self.hmtd.bind(self.session(session), target)?;
                self.machines.insert(view.session.machine_id());
                let next = view.next_expected.map(|n| n.to_string()).unwrap_or_default();
                ok(format!("{:?} at {}, next {next}", view.session.phase(), view.session.start_time().unwrap_or_default()))
            }
            Action::Scan { session, kind, tag_id } => {
                let response = self.hmtd.scan(self.session(session), TagIdentity::new(*kind, *tag_id)?)?;
                Ok((result_code(&response.outcome), describe_outcome(&response.outcome)))
            }
            Action::ReportDefect { session, part_id, replacement_id } => {
                let view = self.hmtd.report_defect(self.session(session), *part_id, *replacement_id)?;
                ok(format!("part {part_id} flagged defective, replaced by {replacement_id}, defects {}", view.session.defect_count()))
            }
            Action::RequestAssistance { session, collab, expert_id } => {
                let opened = self.hmtd.assist(self.session(session), expert_id)?;
                self.collabs.insert(collab.clone(), opened.collab_id());
                let snapshot = opened.snapshot();
                ok(format!(
                    "{collab} = collab {} with {expert_id}, snapshot cursor {}, history {}, {} recent events",
                    opened.collab_id(),
                    snapshot.step_cursor,
                    snapshot.context.environment.history.len(),
                    snapshot.recent_events.len()
                ))
            }
            Action::SendIndication { collab, indication } => {
                let seq = self.hmtd.send_indication(self.collab(collab), indication.clone())?;
                ok(format!("seq {seq} {}", indication.summary()))
            }
            Action::PollIndications { collab, after } => {
                let items = self.hmtd.poll(self.collab(collab), *after)?;
                let listed: Vec<String> = items.iter().map(|i| format!("#{} {}", i.seq, i.payload.summary())).collect();
                ok(format!("{} indication(s){}{}", items.len(), if listed.is_empty() { "" } else { ": " }, listed.join("; ")))
            }
            Action::CloseAssistance { collab } => {
                let closed = self.hmtd.close_collab(self.collab(collab))?;
                ok(format!("{:?} after {} indication(s)", closed.state(), closed.last_seq()))
            }
            Action::ResolveContext { machine_id, mode } => {
                let resolved = self.hmtd.context(*machine_id, *mode, None)?;
                let env = &resolved.bundle.environment;
                let name = env.characteristics.as_ref().map_or("-".to_string(), |c| c.name.clone());
                ok(format!(
                    "{:?}: machine {} ({name}), history {}, last operators {:?}",
                    resolved.provenance,
                    env.machine_id,
                    env.history.len(),
                    env.last_operators
                ))
            }
            Action::Complete { session } | Action::Abort { session } => {
                let id = self.session(session);
                let done = if matches!(action, Action::Complete { .. }) { self.hmtd.complete(id)? } else { self.hmtd.abort(id)? };
                let r = &done.record;
                ok(format!(
                    "{:?} at {}, record #{} {:?} steps {} defects {}{}",
                    done.session.session.phase(),
                    r.end_time,
                    r.intervention_id,
                    r.outcome,
                    r.step_count,
                    r.defect_count,
                    if done.synced { ", synced to server" } else { ", kept on tag" }
                ))
            }
            Action::SetConnectivity { mode } => {
                let synced = self.hmtd.set_connectivity(*mode)?;
                if synced.is_empty() {
                    ok(mode_name(*mode).to_string())
                } else {
                    ok(format!("{}, synced machines {synced:?}", mode_name(*mode)))
                }
            }
        }
    }

    fn final_state(&self, out: &mut String) -> Result<(), ServiceError> {
        out.push_str("final state\n");
        let mut sessions: Vec<_> = self.sessions.iter().collect();
        sessions.sort_by_key(|(_, id)| **id);
        for (alias, id) in sessions {
            let view = self.hmtd.session(*id)?;
            let s = &view.session;
            let replaced: Vec<String> = s.replaced_parts().iter().map(|(a, b)| format!("{a}->{b}")).collect();
            writeln!(
                out,
                "  {alias} = session {id}: {:?}, cursor {}/{}, defects {}, replaced [{}]",
                s.phase(),
                s.step_cursor(),
                s.workflow().step_count(),
                s.defect_count(),
                replaced.join(", ")
            )
            .expect("string write");
        }
        let mut collabs: Vec<_> = self.collabs.iter().collect();
        collabs.sort_by_key(|(_, id)| **id);
        for (alias, id) in collabs {
            let collab = self.hmtd.collab(*id)?;
            writeln!(out, "  {alias} = collab {id}: {:?}, {} indication(s)", collab.state(), collab.last_seq())
                .expect("string write");
        }
        for machine in &self.machines {
            let tag = self.hmtd.layout().load_tag(TagIdentity::new(TagKind::Machine, *machine)?)?;
            let history = tag.read_history()?;
            let newest = history.last().map_or("none".to_string(), |r| format!("#{} {:?}", r.intervention_id, r.outcome));
            let server = self.hmtd.sgdt().get(*machine).map_or(0, |r| r.history.len());
            writeln!(out, "  machine {machine}: tag holds {} record(s), newest {newest}; server holds {server}", history.len())
                .expect("string write");
        }
        Ok(())
    }
}

/// Runs `script` against an already opened service.
pub fn run_scenario(script: &ScenarioScript, hmtd: &Hmtd) -> Result<Transcript, ServiceError> {
    if script.actions.is_empty() {
        return Ok(Transcript { text: String::new(), deviation: None, digest: ledger_digest(&hmtd.ledger().events()) });
    }
    let mut out = String::new();
    writeln!(out, "scenario {}", script.name).expect("string write");
    writeln!(
        out,
        "clock {} step {} min, {}",
        script.clock_start,
        script.clock_step,
        mode_name(script.connectivity)
    )
    .expect("string write");
    let mut runner = Runner { hmtd, sessions: HashMap::new(), collabs: HashMap::new(), machines: BTreeSet::new() };
    let mut deviation = None;
    for (i, step) in script.actions.iter().enumerate() {
        let label = action_label(&step.action);
        let (code, text, failed) = match runner.step(&step.action) {
            Ok((code, text)) => (code, text, false),
            Err(e) => (e.code().to_string(), format!("error {}: {e}", e.code()), true),
        };
        let accepted = match &step.expect {
            Some(expected) => *expected == code,
            None => !failed,
        };
        let expected = step.expect.clone().unwrap_or_else(|| "success".into());
        if accepted {
            writeln!(out, "{:03} {label} -> {text}", i + 1).expect("string write");
        } else {
            writeln!(out, "{:03} {label} -> DEVIATION at line {}: expected {expected}, got {text}", i + 1, step.line)
                .expect("string write");
            deviation = Some(Deviation { step: i + 1, line: step.line, expected, actual: code, message: text });
            break;
        }
    }
    runner.final_state(&mut out)?;
    let events = hmtd.ledger().events();
    let mut counts: BTreeMap<EventKind, usize> = BTreeMap::new();
    for event in &events {
        *counts.entry(event.kind).or_default() += 1;
    }
    writeln!(out, "ledger {} event(s)", events.len()).expect("string write");
    for (kind, count) in counts {
        writeln!(out, "  {kind} {count}").expect("string write");
    }
    let digest = ledger_digest(&events);
    writeln!(out, "ledger digest {digest}").expect("string write");
    Ok(Transcript { text: out, deviation, digest })
}

fn action_label(action: &Action) -> String {
    match action {
        Action::Authenticate { session, badge_id, workflow_id } => {
            format!("Authenticate {session} badge {badge_id} workflow {workflow_id}")
        }
        Action::BindMachine { session, machine_id: Some(id), .. } => format!("BindMachine {session} machine {id}"),
        Action::BindMachine { session, machine_tag_file, .. } => format!(
            "BindMachine {session} file {}",
            machine_tag_file.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
        ),
        Action::Scan { session, kind, tag_id } => format!("Scan {session} {kind} {tag_id}"),
        Action::ReportDefect { session, part_id, replacement_id } => {
            format!("ReportDefect {session} part {part_id} replacement {replacement_id}")
        }
        Action::RequestAssistance { session, collab, expert_id } => {
            format!("RequestAssistance {session} {collab} expert {expert_id}")
        }
        Action::SendIndication { collab, indication } => format!("SendIndication {collab} {:?}", indication.kind()),
        Action::PollIndications { collab, after } => format!("PollIndications {collab} after {after}"),
        Action::CloseAssistance { collab } => format!("CloseAssistance {collab}"),
        Action::ResolveContext { machine_id, mode } => format!(
            "ResolveContext machine {machine_id} {}",
            mode.map_or("current", mode_name)
        ),
        Action::Complete { session } => format!("Complete {session}"),
        Action::Abort { session } => format!("Abort {session}"),
        Action::SetConnectivity { mode } => format!("SetConnectivity {}", mode_name(*mode)),
    }
}

/// Seeds `data_dir` from `world` when given, opens the service with the
/// script's clock and runs the script.
pub fn run_in(script: &ScenarioScript, data_dir: &Path, world: Option<&Path>) -> Result<Transcript, ServiceError> {
    if let Some(world) = world {
        DataLayout::new(data_dir).seed_from(world)?;
    }
    let hmtd = Hmtd::open(ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        clock: Clock::logical(script.clock_start, script.clock_step),
        connectivity: script.connectivity,
    })?;
    run_scenario(script, &hmtd)
}
