//! Deterministic multi-agent simulator for distributed continual learning.
//!
//! Agents connected by a communication graph learn a stream of
//! classification tasks and exchange knowledge in one of three granularities:
//! raw data instances, full model parameters, or self-contained modules.
//! Every exchanged float is charged to a cost ledger.

pub mod budget;
pub mod config;
pub mod error;
pub mod modular;
pub mod nn;
pub mod payload;
pub mod persist;
pub mod report;
pub mod rng;
pub mod sim;
pub mod sharing;
pub mod tasks;
pub mod topology;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{DclError, Result};
pub use payload::Payload;

/// Index of an agent in the collective.
pub type AgentId = usize;

/// Globally unique task identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.0)
    }
}
