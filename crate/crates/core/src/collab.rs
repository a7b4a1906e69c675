//! Remote expert assistance.
//!
//! A collaboration session hands the expert a snapshot of the intervention
//! (context bundle, step cursor, recent trace events) and carries the
//! expert's indications back to the technician in send order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextBundle;
use crate::prescription::{InterventionSession, Phase, SessionId};
use crate::time::Minutes;
use crate::trace::{EventKind, NewEvent, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollabError {
    #[error("intervention is {0:?}, assistance needs an intervention in progress")]
    WrongPhase(Phase),
    #[error("expert `{0}` is not registered")]
    ExpertUnavailable(String),
    #[error("collaboration session {0} is closed")]
    SessionClosed(u32),
    #[error("malformed indication: {0}")]
    MalformedIndication(String),
    #[error("unknown collaboration session {0}")]
    UnknownSession(u32),
}

impl CollabError {
    pub fn code(&self) -> &'static str {
        match self {
            CollabError::WrongPhase(_) => "WrongPhase",
            CollabError::ExpertUnavailable(_) => "ExpertUnavailable",
            CollabError::SessionClosed(_) => "SessionClosed",
            CollabError::MalformedIndication(_) => "MalformedIndication",
            CollabError::UnknownSession(_) => "UnknownSession",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Expert {
    pub expert_id: String,
    pub name: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExpertDirectory {
    experts: BTreeMap<String, Expert>,
}

impl ExpertDirectory {
    pub fn new(experts: impl IntoIterator<Item = Expert>) -> Self {
        ExpertDirectory { experts: experts.into_iter().map(|e| (e.expert_id.clone(), e)).collect() }
    }

    pub fn get(&self, expert_id: &str) -> Option<&Expert> {
        self.experts.get(expert_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Arrow,
    Circle,
    Highlight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IndicationKind {
    Graphical,
    Oral,
    Textual,
}

/// Indication content. On the wire it is `{"kind": ..., "payload": {...}}`,
/// so a payload that does not match its kind fails to decode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum IndicationPayload {
    #[serde(rename_all = "kebab-case")]
    Graphical { anchor_tag_id: u32, shape: Shape, label: String },
    #[serde(rename_all = "kebab-case")]
    Oral {
        transcript: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        audio_ref: Option<String>,
    },
    Textual { text: String },
}

impl IndicationPayload {
    pub fn kind(&self) -> IndicationKind {
        match self {
            IndicationPayload::Graphical { .. } => IndicationKind::Graphical,
            IndicationPayload::Oral { .. } => IndicationKind::Oral,
            IndicationPayload::Textual { .. } => IndicationKind::Textual,
        }
    }

    pub fn validate(&self) -> Result<(), CollabError> {
        let malformed = |why: &str| Err(CollabError::MalformedIndication(why.to_string()));
        match self {
            IndicationPayload::Graphical { anchor_tag_id: 0, .. } => malformed("graphical indication anchored to tag 0"),
            IndicationPayload::Oral { transcript, .. } if transcript.trim().is_empty() => {
                malformed("oral indication without transcript")
            }
            IndicationPayload::Oral { audio_ref: Some(uri), .. } if uri.trim().is_empty() => {
                malformed("empty audio reference")
            }
            IndicationPayload::Textual { text } if text.trim().is_empty() => malformed("empty text"),
            _ => Ok(()),
        }
    }

    /// One-line rendering for trace details and transcripts.
    pub fn summary(&self) -> String {
        match self {
            IndicationPayload::Graphical { anchor_tag_id, shape, label } => {
                format!("Graphical {shape:?} on tag {anchor_tag_id}: {label}")
            }
            IndicationPayload::Oral { transcript, .. } => format!("Oral: {transcript}"),
            IndicationPayload::Textual { text } => format!("Textual: {text}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Indication {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: IndicationPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollabState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ContextSnapshot {
    pub context: ContextBundle,
    pub step_cursor: usize,
    pub phase: Phase,
    pub recent_events: Vec<TraceEvent>,
    pub taken_at: Minutes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CollabSession {
    collab_id: u32,
    session_id: SessionId,
    expert_id: String,
    operator_badge_id: u32,
    machine_id: u32,
    state: CollabState,
    outbox: Vec<Indication>,
    snapshot: ContextSnapshot,
}

impl CollabSession {
    /// Opens assistance on an in-progress intervention.
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        collab_id: u32,
        intervention: &InterventionSession,
        expert_id: &str,
        experts: &ExpertDirectory,
        context: ContextBundle,
        recent_events: Vec<TraceEvent>,
        now: Minutes,
    ) -> Result<(Self, NewEvent), CollabError> {
        if intervention.phase() != Phase::InProgress {
            return Err(CollabError::WrongPhase(intervention.phase()));
        }
        let expert = experts.get(expert_id).ok_or_else(|| CollabError::ExpertUnavailable(expert_id.to_string()))?;
        let session = CollabSession {
            collab_id,
            session_id: intervention.session_id(),
            expert_id: expert.expert_id.clone(),
            operator_badge_id: intervention.operator().badge_id,
            machine_id: intervention.machine_id(),
            state: CollabState::Open,
            outbox: Vec::new(),
            snapshot: ContextSnapshot {
                context,
                step_cursor: intervention.step_cursor(),
                phase: intervention.phase(),
                recent_events,
                taken_at: now,
            },
        };
        let mut event = session.event(EventKind::AssistanceRequested, now);
        event.detail = format!("collab {collab_id} with {}", expert.expert_id);
        Ok((session, event))
    }

    fn event(&self, kind: EventKind, now: Minutes) -> NewEvent {
        NewEvent::new(kind, now, self.session_id, self.operator_badge_id, self.machine_id)
    }

    pub fn collab_id(&self) -> u32 {
        self.collab_id
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn expert_id(&self) -> &str {
        &self.expert_id
    }

    pub fn state(&self) -> CollabState {
        self.state
    }

    pub fn snapshot(&self) -> &ContextSnapshot {
        &self.snapshot
    }

    pub fn last_seq(&self) -> u64 {
        self.outbox.last().map_or(0, |i| i.seq)
    }

    /// Replaces the snapshot with a fresh view of the intervention.
    pub fn refresh_snapshot(
        &mut self,
        intervention: &InterventionSession,
        context: ContextBundle,
        recent_events: Vec<TraceEvent>,
        now: Minutes,
    ) {
        self.snapshot = ContextSnapshot {
            context,
            step_cursor: intervention.step_cursor(),
            phase: intervention.phase(),
            recent_events,
            taken_at: now,
        };
    }

    pub fn send_indication(&mut self, payload: IndicationPayload, now: Minutes) -> Result<(u64, NewEvent), CollabError> {
        if self.state == CollabState::Closed {
            return Err(CollabError::SessionClosed(self.collab_id));
        }
        payload.validate()?;
        let seq = self.last_seq() + 1;
        let mut event = self.event(EventKind::IndicationSent, now);
        if let IndicationPayload::Graphical { anchor_tag_id, .. } = payload {
            event.detail = format!("#{seq} {:?} on tag {anchor_tag_id}", payload.kind());
        } else {
            event.detail = format!("#{seq} {:?}", payload.kind());
        }
        self.outbox.push(Indication { seq, payload });
        Ok((seq, event))
    }

    /// Indications with `seq > after_seq`, in send order.
    pub fn poll_indications(&self, after_seq: u64) -> Vec<Indication> {
        let start = self.outbox.partition_point(|i| i.seq <= after_seq);
        self.outbox[start..].to_vec()
    }

    pub fn close(&mut self) -> Result<(), CollabError> {
        if self.state == CollabState::Closed {
            return Err(CollabError::SessionClosed(self.collab_id));
        }
        self.state = CollabState::Closed;
        Ok(())
    }
}
