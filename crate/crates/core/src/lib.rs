//! Core of the HMTD maintenance assistant.
//!
//! The crate is split along the life of an intervention:
//!
//! - [`tag`]: 256-octet simulated RFID memories carried by machines, parts,
//!   tools and operator badges.
//! - [`prescription`]: workflow definitions and the intervention state
//!   machine that gates every step on scanning the prescribed tool and part.
//! - [`trace`]: the append-only ledger every operation is recorded into, with
//!   per-part, per-tool and per-session queries and session replay.
//! - [`context`]: machine context resolution from the technical data server
//!   or, when disconnected, from the machine tag alone.
//! - [`collab`]: remote expert assistance sessions and their indication queue.
//! - [`taskmodel`]: task trees, device configuration derivation and IRVO
//!   perceptual continuity scoring.

pub mod collab;
pub mod context;
pub mod prescription;
pub mod tag;
pub mod taskmodel;
pub mod time;
pub mod trace;

pub use time::Minutes;
