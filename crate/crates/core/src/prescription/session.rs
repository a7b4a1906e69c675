use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Operator, OperatorDirectory, PrescriptionError, StepPhase, WorkflowDefinition};
use crate::tag::{HistoryRecord, Outcome, TagError, TagIdentity, TagKind, TagMemory};
use crate::time::Minutes;
use crate::trace::{EventKind, NewEvent, ReplayError, TraceEvent};

/// Identifies an intervention. The same number is written to the machine tag
/// as the history record's intervention id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    AwaitingMachine,
    InProgress,
    /// Reserved: replacements are supplied together with the defect report,
    /// so the engine never parks a session here.
    AwaitingReplacementPart,
    Completed,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanSubstate {
    ExpectTool,
    ExpectPart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanResult {
    ToolAccepted,
    #[serde(rename = "PartAccepted-StepComplete")]
    PartAcceptedStepComplete,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    WrongTool,
    WrongPart,
    OutOfOrder,
    WrongPhase,
    DefectivePartPending,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::WrongTool => "WrongTool",
            RejectReason::WrongPart => "WrongPart",
            RejectReason::OutOfOrder => "OutOfOrder",
            RejectReason::WrongPhase => "WrongPhase",
            RejectReason::DefectivePartPending => "DefectivePartPending",
        }
    }
}

/// The tag the session will accept next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExpectedTag {
    pub kind: TagKind,
    pub entity_id: u32,
    /// Step the tag belongs to; absent for the machine binding.
    pub step_index: Option<usize>,
}

impl fmt::Display for ExpectedTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step_index {
            Some(step) => write!(f, "{} {} (step {step})", self.kind, self.entity_id),
            None => write!(f, "{} {}", self.kind, self.entity_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScanOutcome {
    pub result: ScanResult,
    pub reason: Option<RejectReason>,
    pub next_expected: Option<ExpectedTag>,
}

/// Live state of one intervention.
///
/// Failed operations leave the session untouched. Rejected scans are not
/// failures: they return an outcome and an event, and leave it untouched too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InterventionSession {
    session_id: SessionId,
    operator: Arc<Operator>,
    workflow: Arc<WorkflowDefinition>,
    phase: Phase,
    step_cursor: usize,
    scan_substate: ScanSubstate,
    start_time: Option<Minutes>,
    end_time: Option<Minutes>,
    defect_count: u32,
    replaced_parts: BTreeMap<u32, u32>,
}

impl InterventionSession {
    /// Opens a session for the operator holding `badge_id`.
    pub fn authenticate(
        session_id: SessionId,
        badge_id: u32,
        directory: &OperatorDirectory,
        workflow: Arc<WorkflowDefinition>,
        now: Minutes,
    ) -> Result<(Self, NewEvent), PrescriptionError> {
        let operator = directory.get(badge_id).ok_or(PrescriptionError::UnknownBadge(badge_id))?;
        if !operator.holds(&workflow.required_qualification) {
            return Err(PrescriptionError::Unqualified {
                badge_id,
                required: workflow.required_qualification.clone(),
            });
        }
        workflow.validate()?;
        let session = Self::fresh(session_id, Arc::new(operator.clone()), workflow);
        let mut event = session.event(EventKind::OperatorAuthenticated, now);
        event.workflow_id = Some(session.workflow.workflow_id);
        event.detail = format!("operator {}", session.operator.name);
        Ok((session, event))
    }

    fn fresh(session_id: SessionId, operator: Arc<Operator>, workflow: Arc<WorkflowDefinition>) -> Self {
        InterventionSession {
            session_id,
            operator,
            workflow,
            phase: Phase::AwaitingMachine,
            step_cursor: 0,
            scan_substate: ScanSubstate::ExpectTool,
            start_time: None,
            end_time: None,
            defect_count: 0,
            replaced_parts: BTreeMap::new(),
        }
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    /// The workflow as currently prescribed, replacements applied.
    pub fn workflow(&self) -> &WorkflowDefinition {
        &self.workflow
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn step_cursor(&self) -> usize {
        self.step_cursor
    }

    pub fn scan_substate(&self) -> ScanSubstate {
        self.scan_substate
    }

    pub fn start_time(&self) -> Option<Minutes> {
        self.start_time
    }

    pub fn end_time(&self) -> Option<Minutes> {
        self.end_time
    }

    pub fn defect_count(&self) -> u32 {
        self.defect_count
    }

    pub fn replaced_parts(&self) -> &BTreeMap<u32, u32> {
        &self.replaced_parts
    }

    pub fn machine_id(&self) -> u32 {
        self.workflow.target_machine_id
    }

    /// True once every step has been validated and only `complete` remains.
    pub fn all_steps_validated(&self) -> bool {
        self.step_cursor == self.workflow.step_count()
    }

    pub fn next_expected(&self) -> Option<ExpectedTag> {
        match self.phase {
            Phase::AwaitingMachine => Some(ExpectedTag {
                kind: TagKind::Machine,
                entity_id: self.workflow.target_machine_id,
                step_index: None,
            }),
            Phase::InProgress => {
                let step = self.workflow.steps.get(self.step_cursor)?;
                let (kind, entity_id) = match self.scan_substate {
                    ScanSubstate::ExpectTool => (TagKind::Tool, step.required_tool_id),
                    ScanSubstate::ExpectPart => (TagKind::Part, step.required_part_id),
                };
                Some(ExpectedTag { kind, entity_id, step_index: Some(step.index) })
            }
            _ => None,
        }
    }

    fn event(&self, kind: EventKind, now: Minutes) -> NewEvent {
        NewEvent::new(kind, now, self.session_id, self.operator.badge_id, self.workflow.target_machine_id)
    }

    fn require_phase(&self, operation: &'static str, allowed: &[Phase]) -> Result<(), PrescriptionError> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(PrescriptionError::WrongPhase { operation, phase: self.phase })
        }
    }

    fn check_machine_tag(&self, tag: &TagMemory) -> Result<(), PrescriptionError> {
        let identity = tag.read_identity()?;
        if identity.kind != TagKind::Machine {
            return Err(TagError::WrongKind { expected: TagKind::Machine, found: identity.kind }.into());
        }
        if identity.entity_id != self.workflow.target_machine_id {
            return Err(PrescriptionError::MachineMismatch {
                expected: self.workflow.target_machine_id,
                found: identity.entity_id,
            });
        }
        Ok(())
    }

    /// Matches the scanned machine tag against the workflow target and starts
    /// the intervention clock.
    pub fn bind_machine(&mut self, machine_tag: &TagMemory, now: Minutes) -> Result<NewEvent, PrescriptionError> {
        self.require_phase("bind_machine", &[Phase::AwaitingMachine])?;
        self.check_machine_tag(machine_tag)?;
        self.phase = Phase::InProgress;
        self.start_time = Some(now);
        Ok(self.event(EventKind::InterventionStarted, now))
    }

    fn judge(&self, tag: TagIdentity) -> Result<ScanResult, RejectReason> {
        let Some(step) = self.workflow.steps.get(self.step_cursor) else {
            return Err(RejectReason::WrongPhase);
        };
        match (self.scan_substate, tag.kind) {
            (ScanSubstate::ExpectTool, TagKind::Tool) if tag.entity_id == step.required_tool_id => {
                Ok(ScanResult::ToolAccepted)
            }
            (ScanSubstate::ExpectTool, TagKind::Tool) => Err(RejectReason::WrongTool),
            (ScanSubstate::ExpectPart, TagKind::Part) if tag.entity_id == step.required_part_id => {
                Ok(ScanResult::PartAcceptedStepComplete)
            }
            (ScanSubstate::ExpectPart, TagKind::Part) if self.replaced_parts.contains_key(&tag.entity_id) => {
                Err(RejectReason::DefectivePartPending)
            }
            (ScanSubstate::ExpectPart, TagKind::Part) => Err(RejectReason::WrongPart),
            _ => Err(RejectReason::OutOfOrder),
        }
    }

    /// Offers one scanned tag to the prescription.
    pub fn scan(&mut self, tag: TagIdentity, now: Minutes) -> Result<(ScanOutcome, NewEvent), PrescriptionError> {
        self.require_phase("scan", &[Phase::InProgress])?;
        let step_index = self.step_cursor;
        match self.judge(tag) {
            Ok(ScanResult::ToolAccepted) => {
                self.scan_substate = ScanSubstate::ExpectPart;
                let mut event = self.event(EventKind::ToolValidated, now);
                event.tool_id = Some(tag.entity_id);
                event.detail = format!("step {step_index}");
                Ok((self.outcome(ScanResult::ToolAccepted, None), event))
            }
            Ok(result) => {
                self.step_cursor += 1;
                self.scan_substate = ScanSubstate::ExpectTool;
                let mut event = self.event(EventKind::StepCompleted, now);
                event.part_id = Some(tag.entity_id);
                event.detail = format!("step {step_index}");
                Ok((self.outcome(result, None), event))
            }
            Err(reason) => {
                let mut event = self.event(EventKind::ScanRejected, now);
                match tag.kind {
                    TagKind::Tool => event.tool_id = Some(tag.entity_id),
                    TagKind::Part => event.part_id = Some(tag.entity_id),
                    TagKind::Machine | TagKind::Badge => {}
                }
                event.detail = rejection_detail(reason, tag, self.next_expected());
                Ok((self.outcome(ScanResult::Rejected, Some(reason)), event))
            }
        }
    }

    fn outcome(&self, result: ScanResult, reason: Option<RejectReason>) -> ScanOutcome {
        ScanOutcome { result, reason, next_expected: self.next_expected() }
    }

    /// Flags `part_tag` defective and substitutes `replacement_part_id` in
    /// every remaining reassembly step that required it.
    pub fn report_defective(
        &mut self,
        part_tag: &mut TagMemory,
        replacement_part_id: u32,
        now: Minutes,
    ) -> Result<NewEvent, PrescriptionError> {
        self.require_phase("report_defective", &[Phase::InProgress])?;
        let identity = part_tag.read_identity()?;
        if identity.kind != TagKind::Part {
            return Err(TagError::WrongKind { expected: TagKind::Part, found: identity.kind }.into());
        }
        let old = identity.entity_id;
        if replacement_part_id == 0
            || replacement_part_id == old
            || self.replaced_parts.contains_key(&replacement_part_id)
        {
            return Err(PrescriptionError::InvalidReplacement(replacement_part_id));
        }
        if self.remaining_reassembly_steps(old).next().is_none() {
            return Err(PrescriptionError::UnknownPart(old));
        }
        let mut flagged = part_tag.clone();
        flagged.set_defect_flag(true)?;

        *part_tag = flagged;
        self.apply_replacement(old, replacement_part_id);
        let mut event = self.event(EventKind::PartReplaced, now);
        event.part_id = Some(old);
        event.replacement_part_id = Some(replacement_part_id);
        event.detail = format!("defect #{}", self.defect_count);
        Ok(event)
    }

    fn remaining_reassembly_steps(&self, part_id: u32) -> impl Iterator<Item = usize> + '_ {
        self.workflow.steps[self.step_cursor..]
            .iter()
            .filter(move |s| s.phase == StepPhase::Reassembly && s.required_part_id == part_id)
            .map(|s| s.index)
    }

    fn apply_replacement(&mut self, old: u32, new: u32) {
        let remaining: Vec<usize> = self.remaining_reassembly_steps(old).collect();
        let workflow = Arc::make_mut(&mut self.workflow);
        for index in remaining {
            workflow.steps[index].required_part_id = new;
        }
        self.replaced_parts.insert(old, new);
        self.defect_count += 1;
    }

    fn history_record(&self, outcome: Outcome, now: Minutes) -> HistoryRecord {
        HistoryRecord {
            intervention_id: self.session_id.0,
            operator_badge_id: self.operator.badge_id,
            workflow_id: self.workflow.workflow_id,
            start_time: self.start_time.unwrap_or(now),
            end_time: now,
            outcome,
            defect_count: u8::try_from(self.defect_count).unwrap_or(u8::MAX),
            step_count: u16::try_from(self.step_cursor).unwrap_or(u16::MAX),
        }
    }

    fn finish(
        &mut self,
        outcome: Outcome,
        now: Minutes,
        machine_tag: &mut TagMemory,
    ) -> Result<(HistoryRecord, NewEvent), PrescriptionError> {
        self.check_machine_tag(machine_tag)?;
        let record = self.history_record(outcome, now);
        let mut written = machine_tag.clone();
        written.append_history(&record)?;

        *machine_tag = written;
        self.end_time = Some(now);
        self.scan_substate = ScanSubstate::ExpectTool;
        let kind = if outcome == Outcome::Aborted {
            self.phase = Phase::Aborted;
            EventKind::InterventionAborted
        } else {
            self.phase = Phase::Completed;
            EventKind::InterventionCompleted
        };
        let mut event = self.event(kind, now);
        event.detail = format!("{outcome:?}, {} steps", record.step_count);
        Ok((record, event))
    }

    /// Closes a fully validated intervention and writes its history record to
    /// the machine tag.
    pub fn complete(
        &mut self,
        now: Minutes,
        machine_tag: &mut TagMemory,
    ) -> Result<(HistoryRecord, NewEvent), PrescriptionError> {
        self.require_phase("complete", &[Phase::InProgress])?;
        if !self.all_steps_validated() {
            return Err(PrescriptionError::IncompleteWorkflow {
                validated: self.step_cursor,
                total: self.workflow.step_count(),
            });
        }
        let outcome = if self.defect_count > 0 { Outcome::CompletedWithReplacement } else { Outcome::Completed };
        self.finish(outcome, now, machine_tag)
    }

    pub fn abort(
        &mut self,
        now: Minutes,
        machine_tag: &mut TagMemory,
    ) -> Result<(HistoryRecord, NewEvent), PrescriptionError> {
        self.require_phase("abort", &[Phase::InProgress, Phase::AwaitingReplacementPart])?;
        self.finish(Outcome::Aborted, now, machine_tag)
    }

    /// Starts a replayed session from its `OperatorAuthenticated` event.
    pub(crate) fn replay_start(
        event: &TraceEvent,
        operator: Operator,
        workflow: WorkflowDefinition,
    ) -> Result<Self, ReplayError> {
        if event.kind != EventKind::OperatorAuthenticated {
            return Err(ReplayError::inconsistent(event, "session does not start with OperatorAuthenticated"));
        }
        Ok(Self::fresh(event.session_id, Arc::new(operator), Arc::new(workflow)))
    }

    /// Folds one recorded event into the state.
    pub(crate) fn replay_apply(&mut self, event: &TraceEvent) -> Result<(), ReplayError> {
        let fail = |why: &str| Err(ReplayError::inconsistent(event, why));
        match event.kind {
            EventKind::OperatorAuthenticated => return fail("duplicate OperatorAuthenticated"),
            EventKind::InterventionStarted => {
                if self.phase != Phase::AwaitingMachine {
                    return fail("start outside AwaitingMachine");
                }
                self.phase = Phase::InProgress;
                self.start_time = Some(event.timestamp);
            }
            EventKind::ToolValidated => match self.next_expected() {
                Some(e) if self.scan_substate == ScanSubstate::ExpectTool && event.tool_id == Some(e.entity_id) => {
                    self.scan_substate = ScanSubstate::ExpectPart;
                }
                _ => return fail("tool validation does not match the prescription"),
            },
            EventKind::StepCompleted => match self.next_expected() {
                Some(e) if self.scan_substate == ScanSubstate::ExpectPart && event.part_id == Some(e.entity_id) => {
                    self.step_cursor += 1;
                    self.scan_substate = ScanSubstate::ExpectTool;
                }
                _ => return fail("step completion does not match the prescription"),
            },
            EventKind::PartReplaced => match (event.part_id, event.replacement_part_id) {
                (Some(old), Some(new)) if self.phase == Phase::InProgress => self.apply_replacement(old, new),
                _ => return fail("replacement without both part ids"),
            },
            EventKind::InterventionCompleted => {
                if !self.all_steps_validated() {
                    return fail("completion before all steps validated");
                }
                self.phase = Phase::Completed;
                self.end_time = Some(event.timestamp);
                self.scan_substate = ScanSubstate::ExpectTool;
            }
            EventKind::InterventionAborted => {
                self.phase = Phase::Aborted;
                self.end_time = Some(event.timestamp);
                self.scan_substate = ScanSubstate::ExpectTool;
            }
            EventKind::ScanRejected | EventKind::AssistanceRequested | EventKind::IndicationSent => {}
        }
        Ok(())
    }
}

/// Rejection text such as `WrongTool: scanned Tool 102, expected Tool 101 (step 1)`.
/// Built by hand: it runs on every rejected scan.
fn rejection_detail(reason: RejectReason, tag: TagIdentity, expected: Option<ExpectedTag>) -> String {
    let mut ids = itoa::Buffer::new();
    let mut out = String::with_capacity(64);
    out.push_str(reason.as_str());
    out.push_str(": scanned ");
    out.push_str(tag.kind.name());
    out.push(' ');
    out.push_str(ids.format(tag.entity_id));
    match expected {
        Some(expected) => {
            out.push_str(", expected ");
            out.push_str(expected.kind.name());
            out.push(' ');
            out.push_str(ids.format(expected.entity_id));
            if let Some(step) = expected.step_index {
                out.push_str(" (step ");
                out.push_str(ids.format(step));
                out.push(')');
            }
        }
        None => out.push_str(", all steps validated"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prescription::StepDefinition;

    const T: Minutes = Minutes(10_000);

    fn directory() -> OperatorDirectory {
        OperatorDirectory::new([
            Operator::new(1001, "Alice", &["MECA-2"]),
            Operator::new(1002, "Bob", &["ELEC-1"]),
        ])
        .unwrap()
    }

    fn one_step() -> Arc<WorkflowDefinition> {
        Arc::new(WorkflowDefinition {
            workflow_id: 1,
            target_machine_id: 42,
            required_qualification: "MECA-2".into(),
            steps: vec![StepDefinition {
                index: 0,
                phase: StepPhase::Disassembly,
                required_tool_id: 100,
                required_part_id: 200,
                doc_assets: vec![],
            }],
        })
    }

    fn started(workflow: Arc<WorkflowDefinition>) -> InterventionSession {
        let (mut s, _) = InterventionSession::authenticate(SessionId(1), 1001, &directory(), workflow, T).unwrap();
        s.bind_machine(&TagMemory::init(TagIdentity::machine(42)), T).unwrap();
        s
    }

    #[test]
    fn authenticate_checks_badge_and_qualification() {
        let (s, event) = InterventionSession::authenticate(SessionId(1), 1001, &directory(), one_step(), T).unwrap();
        assert_eq!(s.phase(), Phase::AwaitingMachine);
        assert_eq!(s.step_cursor(), 0);
        assert_eq!(s.scan_substate(), ScanSubstate::ExpectTool);
        assert_eq!(event.kind, EventKind::OperatorAuthenticated);
        assert_eq!(event.workflow_id, Some(1));

        let err = InterventionSession::authenticate(SessionId(1), 1002, &directory(), one_step(), T).unwrap_err();
        assert_eq!(err.code(), "Unqualified");
        let err = InterventionSession::authenticate(SessionId(1), 9, &directory(), one_step(), T).unwrap_err();
        assert_eq!(err, PrescriptionError::UnknownBadge(9));
    }

    #[test]
    fn bind_machine_matches_identity() {
        let (mut s, _) = InterventionSession::authenticate(SessionId(1), 1001, &directory(), one_step(), T).unwrap();
        let before = s.clone();
        let err = s.bind_machine(&TagMemory::init(TagIdentity::machine(43)), T).unwrap_err();
        assert_eq!(err, PrescriptionError::MachineMismatch { expected: 42, found: 43 });
        let err = s.bind_machine(&TagMemory::init(TagIdentity::part(42)), T).unwrap_err();
        assert_eq!(err.code(), "WrongKind");
        let mut corrupt = TagMemory::init(TagIdentity::machine(42));
        corrupt.bytes_mut()[5] ^= 1;
        assert_eq!(s.bind_machine(&corrupt, T).unwrap_err().code(), "CorruptTag");
        assert_eq!(s, before);

        let event = s.bind_machine(&TagMemory::init(TagIdentity::machine(42)), T.plus(3)).unwrap();
        assert_eq!(event.kind, EventKind::InterventionStarted);
        assert_eq!(s.phase(), Phase::InProgress);
        assert_eq!(s.start_time(), Some(T.plus(3)));
    }

    #[test]
    fn tool_then_part_advances() {
        let mut s = started(one_step());
        let (o, e) = s.scan(TagIdentity::tool(100), T).unwrap();
        assert_eq!(o.result, ScanResult::ToolAccepted);
        assert_eq!(e.kind, EventKind::ToolValidated);
        assert_eq!(o.next_expected.unwrap().kind, TagKind::Part);
        let (o, e) = s.scan(TagIdentity::part(200), T).unwrap();
        assert_eq!(o.result, ScanResult::PartAcceptedStepComplete);
        assert_eq!(e.kind, EventKind::StepCompleted);
        assert_eq!(s.step_cursor(), 1);
        assert_eq!(o.next_expected, None);
    }

    #[test]
    fn part_first_is_out_of_order() {
        let mut s = started(one_step());
        let before = s.clone();
        let (o, e) = s.scan(TagIdentity::part(200), T).unwrap();
        assert_eq!(o.result, ScanResult::Rejected);
        assert_eq!(o.reason, Some(RejectReason::OutOfOrder));
        assert_eq!(e.kind, EventKind::ScanRejected);
        assert_eq!(e.part_id, Some(200));
        assert_eq!(s, before);
    }

    #[test]
    fn wrong_tool_and_wrong_part() {
        let mut s = started(one_step());
        let (o, e) = s.scan(TagIdentity::tool(101), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::WrongTool));
        assert_eq!(e.tool_id, Some(101));
        s.scan(TagIdentity::tool(100), T).unwrap();
        let (o, _) = s.scan(TagIdentity::part(201), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::WrongPart));
        let (o, _) = s.scan(TagIdentity::tool(100), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::OutOfOrder));
        let (o, _) = s.scan(TagIdentity::machine(42), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::OutOfOrder));
        assert_eq!(s.step_cursor(), 0);
    }

    #[test]
    fn scans_after_last_step_are_wrong_phase_rejections() {
        let mut s = started(one_step());
        s.scan(TagIdentity::tool(100), T).unwrap();
        s.scan(TagIdentity::part(200), T).unwrap();
        let (o, _) = s.scan(TagIdentity::tool(100), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::WrongPhase));
    }

    #[test]
    fn scan_before_binding_is_an_error() {
        let (mut s, _) = InterventionSession::authenticate(SessionId(1), 1001, &directory(), one_step(), T).unwrap();
        assert_eq!(s.scan(TagIdentity::tool(100), T).unwrap_err().code(), "WrongPhase");
    }

    fn two_part_mirror() -> Arc<WorkflowDefinition> {
        Arc::new(WorkflowDefinition::with_mirrored_reassembly(2, 42, "MECA-2", &[(100, 200), (101, 201)]).unwrap())
    }

    #[test]
    fn replacement_rewrites_reassembly() {
        let mut s = started(two_part_mirror());
        for (tool, part) in [(100, 200), (101, 201)] {
            s.scan(TagIdentity::tool(tool), T).unwrap();
            s.scan(TagIdentity::part(part), T).unwrap();
        }
        let mut part_tag = TagMemory::init(TagIdentity::part(200));
        let event = s.report_defective(&mut part_tag, 250, T).unwrap();
        assert_eq!(event.kind, EventKind::PartReplaced);
        assert_eq!((event.part_id, event.replacement_part_id), (Some(200), Some(250)));
        assert!(part_tag.is_defective().unwrap());
        assert_eq!(s.defect_count(), 1);
        assert_eq!(s.replaced_parts().get(&200), Some(&250));

        s.scan(TagIdentity::tool(101), T).unwrap();
        s.scan(TagIdentity::part(201), T).unwrap();
        s.scan(TagIdentity::tool(100), T).unwrap();
        let (o, _) = s.scan(TagIdentity::part(200), T).unwrap();
        assert_eq!(o.reason, Some(RejectReason::DefectivePartPending));
        let (o, _) = s.scan(TagIdentity::part(250), T).unwrap();
        assert_eq!(o.result, ScanResult::PartAcceptedStepComplete);

        let mut machine = TagMemory::init(TagIdentity::machine(42));
        let (record, _) = s.complete(T.plus(30), &mut machine).unwrap();
        assert_eq!(record.outcome, Outcome::CompletedWithReplacement);
        assert_eq!(record.defect_count, 1);
        assert_eq!(machine.read_history().unwrap(), vec![record]);
    }

    #[test]
    fn defect_report_errors() {
        let mut s = started(two_part_mirror());
        let before = s.clone();
        let mut stray = TagMemory::init(TagIdentity::part(999));
        assert_eq!(s.report_defective(&mut stray, 250, T).unwrap_err(), PrescriptionError::UnknownPart(999));
        let mut tool = TagMemory::init(TagIdentity::tool(100));
        assert_eq!(s.report_defective(&mut tool, 250, T).unwrap_err().code(), "WrongKind");
        let mut part = TagMemory::init(TagIdentity::part(200));
        assert_eq!(s.report_defective(&mut part, 0, T).unwrap_err().code(), "InvalidReplacement");
        assert!(!part.is_defective().unwrap());
        assert_eq!(s, before);
    }

    #[test]
    fn complete_requires_all_steps() {
        let mut s = started(two_part_mirror());
        s.scan(TagIdentity::tool(100), T).unwrap();
        s.scan(TagIdentity::part(200), T).unwrap();
        s.scan(TagIdentity::tool(101), T).unwrap();
        s.scan(TagIdentity::part(201), T).unwrap();
        let mut machine = TagMemory::init(TagIdentity::machine(42));
        let untouched = machine.clone();
        let err = s.complete(T, &mut machine).unwrap_err();
        assert_eq!(err, PrescriptionError::IncompleteWorkflow { validated: 2, total: 4 });
        assert_eq!(machine, untouched);
    }

    #[test]
    fn complete_writes_history_record() {
        let mut s = started(two_part_mirror());
        for (tool, part) in [(100, 200), (101, 201), (101, 201), (100, 200)] {
            s.scan(TagIdentity::tool(tool), T).unwrap();
            s.scan(TagIdentity::part(part), T).unwrap();
        }
        let mut machine = TagMemory::init(TagIdentity::machine(42));
        let (record, event) = s.complete(T.plus(45), &mut machine).unwrap();
        assert_eq!(event.kind, EventKind::InterventionCompleted);
        assert_eq!(record.step_count, 4);
        assert_eq!(record.outcome.code(), 0x00);
        assert_eq!(record.start_time, T);
        assert_eq!(record.end_time, T.plus(45));
        assert_eq!(s.phase(), Phase::Completed);
        assert_eq!(s.end_time(), Some(T.plus(45)));
        assert_eq!(machine.read_history().unwrap(), vec![record]);
    }

    #[test]
    fn complete_rejects_other_machine_tag() {
        let mut s = started(one_step());
        s.scan(TagIdentity::tool(100), T).unwrap();
        s.scan(TagIdentity::part(200), T).unwrap();
        let mut other = TagMemory::init(TagIdentity::machine(7));
        assert_eq!(s.complete(T, &mut other).unwrap_err().code(), "MachineMismatch");
        assert_eq!(s.phase(), Phase::InProgress);
    }

    #[test]
    fn abort_paths() {
        let mut s = started(one_step());
        let mut machine = TagMemory::init(TagIdentity::machine(42));
        let (record, event) = s.abort(T.plus(1), &mut machine).unwrap();
        assert_eq!(record.step_count, 0);
        assert_eq!(record.outcome, Outcome::Aborted);
        assert_eq!(event.kind, EventKind::InterventionAborted);
        assert_eq!(s.scan(TagIdentity::tool(100), T).unwrap_err().code(), "WrongPhase");
        assert_eq!(s.abort(T, &mut machine).unwrap_err().code(), "WrongPhase");

        let mut done = started(one_step());
        done.scan(TagIdentity::tool(100), T).unwrap();
        done.scan(TagIdentity::part(200), T).unwrap();
        done.complete(T, &mut machine).unwrap();
        assert_eq!(done.abort(T, &mut machine).unwrap_err().code(), "WrongPhase");
    }

    #[test]
    fn outcome_serializes_with_wire_names() {
        let outcome = ScanOutcome {
            result: ScanResult::PartAcceptedStepComplete,
            reason: None,
            next_expected: Some(ExpectedTag { kind: TagKind::Tool, entity_id: 101, step_index: Some(1) }),
        };
        let json = serde_json::to_value(outcome).unwrap();
        assert_eq!(json["result"], "PartAccepted-StepComplete");
        assert_eq!(json["next-expected"]["entity-id"], 101);
    }
}

