//! Task streams: synthetic Gaussian-prototype families, the combined
//! heterogeneous setting, IDX ingestion, and per-task replay buffers.

mod idx;
mod replay;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::InstanceBatch;
use crate::TaskId;

pub use idx::{load_idx, write_idx, IdxData};
pub use replay::{Provenance, ReplayBuffer, ReplayItem};
pub use synthetic::{
    gen_combined_stream, gen_dataset_stream, gen_synthetic_stream, group_sizes, SyntheticConfig,
};

/// Dimensions of one instance; its float cost is `height * width * channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InstanceShape {
    pub fn flat(dim: usize) -> Self {
        Self {
            height: 1,
            width: dim,
            channels: 1,
        }
    }

    pub fn floats(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Synthetic family index: 0 = A, 1 = B, 2 = C, ...
    Synthetic(u8),
    Dataset(String),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Synthetic(i) => write!(f, "synthetic-{}", (b'A' + i) as char),
            Family::Dataset(name) => f.write_str(name),
        }
    }
}

/// One supervised task. Batch labels are indices into `labels`, which holds
/// global class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub family: Family,
    pub labels: Vec<u32>,
    pub shape: InstanceShape,
    pub train: InstanceBatch,
    pub val: InstanceBatch,
    pub test: InstanceBatch,
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// Local label index of a global class id.
    pub fn local_label(&self, class: u32) -> Option<usize> {
        self.labels.iter().position(|c| *c == class)
    }

    /// Class ids qualified by family, so equal ids from different families
    /// never collide in label-set comparisons.
    pub fn qualified_labels(&self) -> Vec<(Family, u32)> {
        self.labels.iter().map(|c| (self.family.clone(), *c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    /// Ordered tasks of each agent.
    pub agents: Vec<Vec<TaskSpec>>,
    /// Combined setting only: family group of each agent.
    pub groups: Option<Vec<u8>>,
}

impl TaskStream {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Length of the longest agent stream.
    pub fn n_tasks(&self) -> usize {
        self.agents.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn task(&self, agent: usize, position: usize) -> Option<&TaskSpec> {
        self.agents.get(agent).and_then(|s| s.get(position))
    }

    /// Every task id, in agent-major order.
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.agents.iter().flatten().map(|t| t.id).collect()
    }
}

/// Task id of an agent's `position`-th task in a stream of `tasks_per_agent`.
pub fn task_id(agent: usize, position: usize, tasks_per_agent: usize) -> TaskId {
    TaskId((agent * tasks_per_agent + position) as u32)
}
