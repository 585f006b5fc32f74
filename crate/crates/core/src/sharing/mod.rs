//! Knowledge exchange at three granularities: raw instances, full model
//! parameters, and self-contained modules.

pub mod data;
pub mod fed;
pub mod modmod;

use serde::{Deserialize, Serialize};

use crate::tasks::Family;

/// A class identified across the collective: family plus class id.
pub type ClassKey = (Family, u32);

/// Which sharing granularity produced a ledger row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareKind {
    Data,
    Fed,
    Modmod,
}

impl ShareKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShareKind::Data => "data",
            ShareKind::Fed => "fed",
            ShareKind::Modmod => "modmod",
        }
    }
}

impl std::str::FromStr for ShareKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "data" => Ok(ShareKind::Data),
            "fed" => Ok(ShareKind::Fed),
            "modmod" => Ok(ShareKind::Modmod),
            other => Err(format!("unknown sharing kind `{other}`")),
        }
    }
}
