use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::InstanceBatch;
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Local,
    Received,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub task: TaskId,
    pub x: Vec<f32>,
    pub y: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
struct Reservoir {
    items: InstanceBatch,
    seen: u64,
}

/// Per-task reservoirs, kept separately for local and received instances;
/// each holds at most `capacity` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    dim: usize,
    capacity: usize,
    store: BTreeMap<(TaskId, Provenance), Reservoir>,
}

impl ReplayBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity,
            store: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert<R: Rng + ?Sized>(
        &mut self,
        task: TaskId,
        x: &[f32],
        y: usize,
        provenance: Provenance,
        rng: &mut R,
    ) {
        if self.capacity == 0 {
            return;
        }
        let dim = self.dim;
        let r = self.store.entry((task, provenance)).or_insert_with(|| Reservoir {
            items: InstanceBatch::new(dim),
            seen: 0,
        });
        r.seen += 1;
        if r.items.len() < self.capacity {
            r.items.push(x, y);
        } else {
            let j = rng.random_range(0..r.seen) as usize;
            if j < self.capacity {
                r.items.x[j * dim..(j + 1) * dim].copy_from_slice(x);
                r.items.y[j] = y;
            }
        }
    }

    pub fn insert_batch<R: Rng + ?Sized>(
        &mut self,
        task: TaskId,
        batch: &InstanceBatch,
        provenance: Provenance,
        rng: &mut R,
    ) {
        for i in 0..batch.len() {
            self.insert(task, batch.row(i), batch.y[i], provenance, rng);
        }
    }

    pub fn len(&self) -> usize {
        self.store.values().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tasks with at least one stored pair, ascending.
    pub fn tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> = self.store.keys().map(|(t, _)| *t).collect();
        t.dedup();
        t
    }

    /// Stored pairs of one task and provenance.
    pub fn stored(&self, task: TaskId, provenance: Provenance) -> Option<&InstanceBatch> {
        self.store.get(&(task, provenance)).map(|r| &r.items)
    }

    /// All pairs of `task`, local first.
    pub fn task_batch(&self, task: TaskId) -> InstanceBatch {
        let mut out = InstanceBatch::new(self.dim);
        for p in [Provenance::Local, Provenance::Received] {
            if let Some(b) = self.stored(task, p) {
                out.extend(b);
            }
        }
        out
    }

    pub fn items(&self) -> Vec<ReplayItem> {
        let mut out = Vec::with_capacity(self.len());
        for ((task, provenance), r) in &self.store {
            for i in 0..r.items.len() {
                out.push(ReplayItem {
                    task: *task,
                    x: r.items.row(i).to_vec(),
                    y: r.items.y[i],
                    provenance: *provenance,
                });
            }
        }
        out
    }

    /// Draws `min(n, stored)` distinct pairs uniformly, optionally within one
    /// task, grouped by task in ascending order.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        task: Option<TaskId>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(TaskId, InstanceBatch)>> {
        if n == 0 {
            return Err(DclError::InvalidArgument("replay sample size must be >= 1".into()));
        }
        let pools: Vec<(TaskId, &InstanceBatch)> = self
            .store
            .iter()
            .filter(|((t, _), _)| task.is_none_or(|want| *t == want))
            .map(|((t, _), r)| (*t, &r.items))
            .collect();
        let total: usize = pools.iter().map(|(_, b)| b.len()).sum();
        if total == 0 {
            return Err(DclError::Empty("replay buffer"));
        }
        let mut picked = sample(rng, total, n.min(total)).into_vec();
        picked.sort_unstable();
        let mut groups: BTreeMap<TaskId, InstanceBatch> = BTreeMap::new();
        let mut base = 0;
        let mut it = picked.into_iter().peekable();
        for (t, batch) in pools {
            while let Some(&i) = it.peek() {
                if i >= base + batch.len() {
                    break;
                }
                groups
                    .entry(t)
                    .or_insert_with(|| InstanceBatch::new(self.dim))
                    .push(batch.row(i - base), batch.y[i - base]);
                it.next();
            }
            base += batch.len();
        }
        Ok(groups.into_iter().collect())
    }
}
