//! Service, scenario runner and command-line surface of the maintenance
//! assistant.

pub mod cli;
pub mod clock;
pub mod error;
pub mod http;
pub mod scenario;
pub mod service;
pub mod world;

pub use error::ServiceError;
pub use service::{Hmtd, ServiceConfig};
