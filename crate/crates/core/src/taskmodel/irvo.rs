use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{parse_document, TaskModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    User,
    RealTool,
    VirtualTool,
    RealObject,
    VirtualObject,
    Sensor,
    Effector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Real,
    Virtual,
    Sensor,
    Effector,
}

impl EntityKind {
    fn side(self) -> Side {
        match self {
            EntityKind::User | EntityKind::RealTool | EntityKind::RealObject => Side::Real,
            EntityKind::VirtualTool | EntityKind::VirtualObject => Side::Virtual,
            EntityKind::Sensor => Side::Sensor,
            EntityKind::Effector => Side::Effector,
        }
    }

    /// Tools and objects, real or virtual: what a user can perceive.
    pub fn is_perceivable(self) -> bool {
        matches!(
            self,
            EntityKind::RealTool | EntityKind::VirtualTool | EntityKind::RealObject | EntityKind::VirtualObject
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Visual,
    Audio,
    Haptic,
    Action,
    Data,
}

impl Channel {
    pub fn is_perceptual(self) -> bool {
        matches!(self, Channel::Visual | Channel::Audio)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub label: String,
}

/// A directed interaction. `via` names the transducer an arrow crosses when
/// it goes between the real and the virtual side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrow {
    pub from: String,
    pub to: String,
    pub channel: Channel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
}

/// Dashed frame with the `+` operator: members are perceived as one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct IrvoModel {
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub arrows: Vec<Arrow>,
    #[serde(default)]
    pub fusion_frames: Vec<FusionFrame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    DuplicateEntity { id: String },
    DanglingArrow { arrow: usize, missing: String },
    /// Something enters a sensor from the virtual side, or a sensor emits
    /// towards the real side.
    SensorDirection { arrow: usize, from: String, to: String },
    EffectorDirection { arrow: usize, from: String, to: String },
    /// A real/virtual crossing with no transducer.
    MissingTransducer { arrow: usize, from: String, to: String },
    NotATransducer { arrow: usize, via: String },
    SingletonFrame { frame: usize },
    FrameMemberUnknown { frame: usize, entity: String },
    FrameMemberNotPerceivable { frame: usize, entity: String },
    OverlappingFrames { entity: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateEntity { id } => write!(f, "entity `{id}` declared twice"),
            Violation::DanglingArrow { arrow, missing } => write!(f, "arrow {arrow} references unknown `{missing}`"),
            Violation::SensorDirection { arrow, from, to } => {
                write!(f, "arrow {arrow} {from}->{to}: sensors only carry real to virtual")
            }
            Violation::EffectorDirection { arrow, from, to } => {
                write!(f, "arrow {arrow} {from}->{to}: effectors only carry virtual to real")
            }
            Violation::MissingTransducer { arrow, from, to } => {
                write!(f, "arrow {arrow} {from}->{to} crosses real/virtual without a transducer")
            }
            Violation::NotATransducer { arrow, via } => write!(f, "arrow {arrow} goes via `{via}`, not a transducer"),
            Violation::SingletonFrame { frame } => write!(f, "fusion frame {frame} has fewer than two members"),
            Violation::FrameMemberUnknown { frame, entity } => write!(f, "fusion frame {frame} references unknown `{entity}`"),
            Violation::FrameMemberNotPerceivable { frame, entity } => {
                write!(f, "fusion frame {frame} member `{entity}` is not a tool or object")
            }
            Violation::OverlappingFrames { entity } => write!(f, "`{entity}` belongs to more than one fusion frame"),
        }
    }
}

impl IrvoModel {
    fn kinds(&self) -> HashMap<&str, EntityKind> {
        self.entities.iter().map(|e| (e.id.as_str(), e.kind)).collect()
    }
}

pub fn load_irvo(document: &str) -> Result<IrvoModel, TaskModelError> {
    parse_document(document)
}

/// Every structural rule breach in the model; empty means valid.
pub fn validate_irvo(model: &IrvoModel) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for entity in &model.entities {
        if !seen.insert(entity.id.as_str()) {
            violations.push(Violation::DuplicateEntity { id: entity.id.clone() });
        }
    }
    let kinds = model.kinds();

    for (i, arrow) in model.arrows.iter().enumerate() {
        let mut ends = Vec::new();
        for id in [&arrow.from, &arrow.to].into_iter().chain(arrow.via.as_ref()) {
            match kinds.get(id.as_str()) {
                Some(kind) => ends.push(kind.side()),
                None => violations.push(Violation::DanglingArrow { arrow: i, missing: id.clone() }),
            }
        }
        if ends.len() != 2 + usize::from(arrow.via.is_some()) {
            continue;
        }
        let (from, to) = (ends[0], ends[1]);
        let (from_id, to_id) = (arrow.from.clone(), arrow.to.clone());
        let sensor_breach = (to == Side::Sensor && from != Side::Real) || (from == Side::Sensor && to != Side::Virtual);
        let effector_breach =
            (to == Side::Effector && from != Side::Virtual) || (from == Side::Effector && to != Side::Real);
        if sensor_breach {
            violations.push(Violation::SensorDirection { arrow: i, from: from_id.clone(), to: to_id.clone() });
        }
        if effector_breach {
            violations.push(Violation::EffectorDirection { arrow: i, from: from_id.clone(), to: to_id.clone() });
        }
        match (arrow.via.as_ref(), ends.get(2)) {
            (Some(_), Some(Side::Sensor)) => {
                if from != Side::Real || to != Side::Virtual {
                    violations.push(Violation::SensorDirection { arrow: i, from: from_id, to: to_id });
                }
            }
            (Some(_), Some(Side::Effector)) => {
                if from != Side::Virtual || to != Side::Real {
                    violations.push(Violation::EffectorDirection { arrow: i, from: from_id, to: to_id });
                }
            }
            (Some(via), _) => violations.push(Violation::NotATransducer { arrow: i, via: via.clone() }),
            (None, _) => {
                let crossing = matches!((from, to), (Side::Real, Side::Virtual) | (Side::Virtual, Side::Real));
                if crossing {
                    violations.push(Violation::MissingTransducer { arrow: i, from: from_id, to: to_id });
                }
            }
        }
    }

    let mut framed: HashMap<&str, usize> = HashMap::new();
    for (i, frame) in model.fusion_frames.iter().enumerate() {
        let distinct: BTreeSet<&str> = frame.members.iter().map(String::as_str).collect();
        if distinct.len() < 2 {
            violations.push(Violation::SingletonFrame { frame: i });
        }
        for member in distinct {
            match kinds.get(member) {
                None => violations.push(Violation::FrameMemberUnknown { frame: i, entity: member.to_string() }),
                Some(kind) if !kind.is_perceivable() => {
                    violations.push(Violation::FrameMemberNotPerceivable { frame: i, entity: member.to_string() })
                }
                Some(_) => {}
            }
            if framed.insert(member, i).is_some() {
                violations.push(Violation::OverlappingFrames { entity: member.to_string() });
            }
        }
    }
    violations
}

/// Number of distinct information sources the model's single user perceives.
/// Members of one fusion frame count once. A model without a user scores 0.
pub fn continuity_score(model: &IrvoModel) -> Result<usize, TaskModelError> {
    let users: Vec<&str> =
        model.entities.iter().filter(|e| e.kind == EntityKind::User).map(|e| e.id.as_str()).collect();
    match users.as_slice() {
        [] => {
            ensure_valid(model)?;
            Ok(0)
        }
        [user] => continuity_score_for(model, user),
        _ => Err(TaskModelError::InvalidModel(vec![])),
    }
}

fn ensure_valid(model: &IrvoModel) -> Result<(), TaskModelError> {
    let violations = validate_irvo(model);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(TaskModelError::InvalidModel(violations))
    }
}

pub fn continuity_score_for(model: &IrvoModel, user_id: &str) -> Result<usize, TaskModelError> {
    ensure_valid(model)?;
    let kinds = model.kinds();
    let frame_of: HashMap<&str, usize> = model
        .fusion_frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.members.iter().map(move |m| (m.as_str(), i)))
        .collect();

    #[derive(PartialEq, Eq, Hash)]
    enum Source<'a> {
        Frame(usize),
        Entity(&'a str),
    }
    let sources: HashSet<Source<'_>> = model
        .arrows
        .iter()
        .filter(|a| a.to == user_id && a.channel.is_perceptual())
        .filter(|a| kinds.get(a.from.as_str()).is_some_and(|k| k.is_perceivable()))
        .map(|a| match frame_of.get(a.from.as_str()) {
            Some(&frame) => Source::Frame(frame),
            None => Source::Entity(a.from.as_str()),
        })
        .collect();
    Ok(sources.len())
}
