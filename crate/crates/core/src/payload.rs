//! Typed units of exchanged knowledge and their float cost.

use serde::{Deserialize, Serialize};

/// What crosses an edge in one sharing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Raw instances; each costs `floats_per_instance` (H*W*C).
    Instances { count: u64, floats_per_instance: u64 },
    /// A flat parameter (or Fisher) vector.
    Parameters { floats: u64 },
    /// A serialized module (see [`crate::modular::serialize_module`]).
    Module { bytes: Vec<u8>, floats: u64 },
}

impl Payload {
    pub fn floats(&self) -> u64 {
        match self {
            Payload::Instances {
                count,
                floats_per_instance,
            } => count * floats_per_instance,
            Payload::Parameters { floats } => *floats,
            Payload::Module { floats, .. } => *floats,
        }
    }
}
