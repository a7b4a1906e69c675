//! Simulated RFID tag memories.
//!
//! Every tag is a 256-octet block. All multi-octet integers are big-endian.
//!
//! ```text
//! 0..2    magic 0x48 0x54 ("HT")
//! 2       layout version (0x01)
//! 3       kind (0x01 machine, 0x02 part, 0x03 tool, 0x04 badge)
//! 4..8    entity id
//! 8       history record count (0..=10)
//! 9       head index: slot holding the oldest record
//! 10      status flags (bit 0: part flagged defective)
//! 11      zero
//! 12..252 ten 24-octet history slots (machine tags only)
//! 252..256 CRC-32 (IEEE) of octets 0..252
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Minutes;

pub const TAG_SIZE: usize = 256;
pub const MAGIC: [u8; 2] = [0x48, 0x54];
pub const LAYOUT_VERSION: u8 = 0x01;
pub const RECORD_SIZE: usize = 24;

const KIND_OFFSET: usize = 3;
const ENTITY_OFFSET: usize = 4;
const COUNT_OFFSET: usize = 8;
const HEAD_OFFSET: usize = 9;
const FLAGS_OFFSET: usize = 10;
const SLOTS_OFFSET: usize = 12;
const CRC_OFFSET: usize = 252;

/// Number of history slots on a machine tag.
pub const HISTORY_CAPACITY: usize = (CRC_OFFSET - SLOTS_OFFSET) / RECORD_SIZE;

const DEFECT_FLAG: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("expected a {expected} tag, found a {found} tag")]
    WrongKind { expected: TagKind, found: TagKind },
    #[error("tag integrity check failed: {0}")]
    CorruptTag(String),
    #[error("invalid tag identity: {0}")]
    InvalidIdentity(String),
    #[error("invalid history record: {0}")]
    InvalidRecord(String),
    #[error("tag file {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl TagError {
    pub fn code(&self) -> &'static str {
        match self {
            TagError::WrongKind { .. } => "WrongKind",
            TagError::CorruptTag(_) => "CorruptTag",
            TagError::InvalidIdentity(_) => "InvalidIdentity",
            TagError::InvalidRecord(_) => "InvalidRecord",
            TagError::Io { .. } => "TagIo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    Machine,
    Part,
    Tool,
    Badge,
}

impl TagKind {
    pub const ALL: [TagKind; 4] = [TagKind::Machine, TagKind::Part, TagKind::Tool, TagKind::Badge];

    pub fn code(self) -> u8 {
        match self {
            TagKind::Machine => 0x01,
            TagKind::Part => 0x02,
            TagKind::Tool => 0x03,
            TagKind::Badge => 0x04,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Lower-case name used in tag file names.
    pub fn name(self) -> &'static str {
        match self {
            TagKind::Machine => "machine",
            TagKind::Part => "part",
            TagKind::Tool => "tool",
            TagKind::Badge => "badge",
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TagKind {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TagError::InvalidIdentity(format!("unknown tag kind `{s}`")))
    }
}

/// What a tag is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TagIdentity {
    pub kind: TagKind,
    pub entity_id: u32,
}

impl TagIdentity {
    pub fn new(kind: TagKind, entity_id: u32) -> Result<Self, TagError> {
        if entity_id == 0 {
            return Err(TagError::InvalidIdentity("entity id must be > 0".into()));
        }
        Ok(TagIdentity { kind, entity_id })
    }

    pub fn machine(id: u32) -> Self {
        Self::checked(TagKind::Machine, id)
    }

    pub fn part(id: u32) -> Self {
        Self::checked(TagKind::Part, id)
    }

    pub fn tool(id: u32) -> Self {
        Self::checked(TagKind::Tool, id)
    }

    pub fn badge(id: u32) -> Self {
        Self::checked(TagKind::Badge, id)
    }

    fn checked(kind: TagKind, id: u32) -> Self {
        assert!(id > 0, "tag entity id must be > 0");
        TagIdentity { kind, entity_id: id }
    }

    /// Snapshot file name, `<kind>-<entity-id>.tag`.
    pub fn file_name(&self) -> String {
        format!("{}-{}.tag", self.kind.name(), self.entity_id)
    }
}

impl fmt::Display for TagIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.entity_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    Aborted,
    CompletedWithReplacement,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Completed => 0x00,
            Outcome::Aborted => 0x01,
            Outcome::CompletedWithReplacement => 0x02,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0x00 => Some(Outcome::Completed),
            0x01 => Some(Outcome::Aborted),
            0x02 => Some(Outcome::CompletedWithReplacement),
            _ => None,
        }
    }
}

/// One intervention summary as stored in a machine tag slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct HistoryRecord {
    pub intervention_id: u32,
    pub operator_badge_id: u32,
    pub workflow_id: u16,
    pub start_time: Minutes,
    pub end_time: Minutes,
    pub outcome: Outcome,
    pub defect_count: u8,
    pub step_count: u16,
}

impl HistoryRecord {
    pub fn validate(&self) -> Result<(), TagError> {
        if self.end_time < self.start_time {
            return Err(TagError::InvalidRecord(format!(
                "intervention {} ends before it starts",
                self.intervention_id
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut out = [0u8; RECORD_SIZE];
        out[0..4].copy_from_slice(&self.intervention_id.to_be_bytes());
        out[4..8].copy_from_slice(&self.operator_badge_id.to_be_bytes());
        out[8..10].copy_from_slice(&self.workflow_id.to_be_bytes());
        out[10..14].copy_from_slice(&self.start_time.0.to_be_bytes());
        out[14..18].copy_from_slice(&self.end_time.0.to_be_bytes());
        out[18] = self.outcome.code();
        out[19] = self.defect_count;
        out[20..22].copy_from_slice(&self.step_count.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8; RECORD_SIZE]) -> Result<Self, TagError> {
        let u32_at = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        if bytes[22] != 0 || bytes[23] != 0 {
            return Err(TagError::InvalidRecord("reserved octets are not zero".into()));
        }
        let outcome = Outcome::from_code(bytes[18])
            .ok_or_else(|| TagError::InvalidRecord(format!("unknown outcome 0x{:02x}", bytes[18])))?;
        let record = HistoryRecord {
            intervention_id: u32_at(0),
            operator_badge_id: u32_at(4),
            workflow_id: u16_at(8),
            start_time: Minutes(u32_at(10)),
            end_time: Minutes(u32_at(14)),
            outcome,
            defect_count: bytes[19],
            step_count: u16_at(20),
        };
        record.validate()?;
        Ok(record)
    }
}

fn crc_of(bytes: &[u8]) -> u32 {
    crc32fast::hash(&bytes[..CRC_OFFSET])
}

/// A 256-octet tag memory image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TagMemory {
    bytes: [u8; TAG_SIZE],
}

impl fmt::Debug for TagMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TagMemory")
            .field("identity", &self.read_identity().ok())
            .field("records", &self.bytes[COUNT_OFFSET])
            .finish()
    }
}

impl TagMemory {
    /// Writes a fresh header for `identity` with an empty history.
    pub fn init(identity: TagIdentity) -> Self {
        let mut bytes = [0u8; TAG_SIZE];
        bytes[0..2].copy_from_slice(&MAGIC);
        bytes[2] = LAYOUT_VERSION;
        bytes[KIND_OFFSET] = identity.kind.code();
        bytes[ENTITY_OFFSET..ENTITY_OFFSET + 4].copy_from_slice(&identity.entity_id.to_be_bytes());
        let mut tag = TagMemory { bytes };
        tag.seal();
        tag
    }

    /// Wraps raw octets without checking them; use [`TagMemory::verify`] or
    /// any reader to validate.
    pub fn from_bytes(bytes: [u8; TAG_SIZE]) -> Self {
        TagMemory { bytes }
    }

    pub fn as_bytes(&self) -> &[u8; TAG_SIZE] {
        &self.bytes
    }

    /// Raw octet access for fault injection in tests and tools.
    pub fn bytes_mut(&mut self) -> &mut [u8; TAG_SIZE] {
        &mut self.bytes
    }

    fn seal(&mut self) {
        let crc = crc_of(&self.bytes);
        self.bytes[CRC_OFFSET..].copy_from_slice(&crc.to_be_bytes());
    }

    pub fn stored_crc(&self) -> u32 {
        u32::from_be_bytes(self.bytes[CRC_OFFSET..].try_into().expect("4 octets"))
    }

    /// Checks CRC, magic, version and the header fields.
    pub fn verify(&self) -> Result<(), TagError> {
        let computed = crc_of(&self.bytes);
        if computed != self.stored_crc() {
            return Err(TagError::CorruptTag(format!(
                "crc mismatch (stored {:08x}, computed {computed:08x})",
                self.stored_crc()
            )));
        }
        if self.bytes[0..2] != MAGIC {
            return Err(TagError::CorruptTag("bad magic".into()));
        }
        if self.bytes[2] != LAYOUT_VERSION {
            return Err(TagError::CorruptTag(format!("unsupported version {}", self.bytes[2])));
        }
        if TagKind::from_code(self.bytes[KIND_OFFSET]).is_none() {
            return Err(TagError::CorruptTag(format!("unknown kind 0x{:02x}", self.bytes[KIND_OFFSET])));
        }
        if self.entity_id_raw() == 0 {
            return Err(TagError::CorruptTag("zero entity id".into()));
        }
        let count = self.bytes[COUNT_OFFSET] as usize;
        let head = self.bytes[HEAD_OFFSET] as usize;
        if count > HISTORY_CAPACITY || head >= HISTORY_CAPACITY {
            return Err(TagError::CorruptTag(format!("bad ring state count={count} head={head}")));
        }
        Ok(())
    }

    fn entity_id_raw(&self) -> u32 {
        u32::from_be_bytes(self.bytes[ENTITY_OFFSET..ENTITY_OFFSET + 4].try_into().expect("4 octets"))
    }

    pub fn read_identity(&self) -> Result<TagIdentity, TagError> {
        self.verify()?;
        let kind = TagKind::from_code(self.bytes[KIND_OFFSET]).expect("verified kind");
        Ok(TagIdentity { kind, entity_id: self.entity_id_raw() })
    }

    fn expect_kind(&self, expected: TagKind) -> Result<TagIdentity, TagError> {
        let identity = self.read_identity()?;
        if identity.kind != expected {
            return Err(TagError::WrongKind { expected, found: identity.kind });
        }
        Ok(identity)
    }

    pub fn record_count(&self) -> usize {
        self.bytes[COUNT_OFFSET] as usize
    }

    pub fn head_index(&self) -> usize {
        self.bytes[HEAD_OFFSET] as usize
    }

    pub fn status_flags(&self) -> u8 {
        self.bytes[FLAGS_OFFSET]
    }

    fn slot_range(slot: usize) -> std::ops::Range<usize> {
        let start = SLOTS_OFFSET + slot * RECORD_SIZE;
        start..start + RECORD_SIZE
    }

    /// Appends to a machine tag's history, overwriting the oldest record once
    /// all slots are used. A failed call leaves the tag untouched.
    pub fn append_history(&mut self, record: &HistoryRecord) -> Result<(), TagError> {
        self.expect_kind(TagKind::Machine)?;
        record.validate()?;
        let count = self.record_count();
        let head = self.head_index();
        let slot = (head + count) % HISTORY_CAPACITY;
        self.bytes[Self::slot_range(slot)].copy_from_slice(&record.encode());
        if count < HISTORY_CAPACITY {
            self.bytes[COUNT_OFFSET] = (count + 1) as u8;
        } else {
            self.bytes[HEAD_OFFSET] = ((head + 1) % HISTORY_CAPACITY) as u8;
        }
        self.seal();
        Ok(())
    }

    /// History records, oldest first.
    pub fn read_history(&self) -> Result<Vec<HistoryRecord>, TagError> {
        self.expect_kind(TagKind::Machine)?;
        let head = self.head_index();
        (0..self.record_count())
            .map(|i| {
                let range = Self::slot_range((head + i) % HISTORY_CAPACITY);
                let raw: &[u8; RECORD_SIZE] = self.bytes[range].try_into().expect("slot size");
                HistoryRecord::decode(raw)
            })
            .collect()
    }

    pub fn set_defect_flag(&mut self, defective: bool) -> Result<(), TagError> {
        self.expect_kind(TagKind::Part)?;
        if defective {
            self.bytes[FLAGS_OFFSET] |= DEFECT_FLAG;
        } else {
            self.bytes[FLAGS_OFFSET] &= !DEFECT_FLAG;
        }
        self.seal();
        Ok(())
    }

    pub fn is_defective(&self) -> Result<bool, TagError> {
        self.expect_kind(TagKind::Part)?;
        Ok(self.bytes[FLAGS_OFFSET] & DEFECT_FLAG != 0)
    }

    /// Snapshot file name for this tag; falls back to the raw header fields
    /// when the tag does not verify.
    pub fn file_name(&self) -> String {
        match self.read_identity() {
            Ok(identity) => identity.file_name(),
            Err(_) => format!("unknown-{}.tag", self.entity_id_raw()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, TagError> {
        let io_err = |message: String| TagError::Io { path: path.to_path_buf(), message };
        let raw = fs::read(path).map_err(|e| io_err(e.to_string()))?;
        let bytes: [u8; TAG_SIZE] = raw
            .try_into()
            .map_err(|raw: Vec<u8>| io_err(format!("expected {TAG_SIZE} octets, found {}", raw.len())))?;
        Ok(TagMemory { bytes })
    }

    pub fn save(&self, path: &Path) -> Result<(), TagError> {
        fs::write(path, self.bytes).map_err(|e| TagError::Io { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Saves under `<dir>/<kind>-<entity-id>.tag` and returns the path.
    pub fn save_in(&self, dir: &Path) -> Result<PathBuf, TagError> {
        let identity = self.read_identity()?;
        let path = dir.join(identity.file_name());
        self.save(&path)?;
        Ok(path)
    }
}

/// Free-function spellings of the tag operations.
pub fn init_tag(identity: TagIdentity) -> TagMemory {
    TagMemory::init(identity)
}

pub fn append_history(tag: &TagMemory, record: &HistoryRecord) -> Result<TagMemory, TagError> {
    let mut next = tag.clone();
    next.append_history(record)?;
    Ok(next)
}

pub fn read_history(tag: &TagMemory) -> Result<Vec<HistoryRecord>, TagError> {
    tag.read_history()
}

pub fn set_defect_flag(tag: &TagMemory, defective: bool) -> Result<TagMemory, TagError> {
    let mut next = tag.clone();
    next.set_defect_flag(defective)?;
    Ok(next)
}
