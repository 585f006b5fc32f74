//! Component dropout: decide whether a new module earns a library slot.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Module, ModuleId, ModularNet};
use crate::error::{DclError, Result};
use crate::nn::{Block, InstanceBatch};
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Minimum validation accuracy gain (fraction, 0.005 = half a point).
    pub keep_threshold: f64,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            keep_threshold: 0.005,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutOutcome {
    pub keep: bool,
    pub chosen: Option<ModuleId>,
    /// Validation accuracy of the best candidate with and without its path.
    pub accuracy_with: f64,
    pub accuracy_without: f64,
}

impl DropoutOutcome {
    fn rejected() -> Self {
        Self {
            keep: false,
            chosen: None,
            accuracy_with: 0.0,
            accuracy_without: 0.0,
        }
    }
}

/// In-progress component dropout over a candidate set. Each candidate owns an
/// independent copy of the net so training one never perturbs another.
#[derive(Debug, Clone)]
pub struct ComponentDropout {
    task: TaskId,
    cfg: DropoutConfig,
    states: Vec<ModularNet>,
    ids: Vec<ModuleId>,
    slot: usize,
    degenerate: bool,
}

impl ComponentDropout {
    /// `net` must already hold `task`. Candidates equal to an existing library
    /// module are skipped; if none remain the outcome is a rejection.
    pub fn new(
        net: &ModularNet,
        task: TaskId,
        candidates: Vec<Module>,
        cfg: DropoutConfig,
        classes_present: usize,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(DclError::Empty("component dropout candidates"));
        }
        if net.structure(task).is_none() {
            return Err(DclError::UnknownTask(task));
        }
        let slot = net.library().len();
        let mut states = Vec::new();
        let mut ids = Vec::new();
        for c in candidates {
            if net.library().iter().any(|m| m.params == c.params) {
                continue;
            }
            let mut state = net.clone();
            ids.push(c.id);
            state.add_module(c)?;
            // The task being learned starts with a uniform row over the grown library.
            let l = state.library().len();
            let mut logits = state.structure(task).unwrap().to_vec();
            for d in 0..state.depth() {
                logits[d * l + slot] = 0.0;
            }
            state.set_structure(task, logits)?;
            states.push(state);
        }
        Ok(Self {
            task,
            cfg,
            states,
            ids,
            slot,
            degenerate: classes_present < 2,
        })
    }

    pub fn candidates(&self) -> &[ModuleId] {
        &self.ids
    }

    /// The first candidate's net, a stand-in for evaluation mid-dropout.
    pub fn preview(&self) -> Option<&ModularNet> {
        self.states.first()
    }

    /// Every candidate's net, for updates that must reach all of them.
    pub fn nets_mut(&mut self) -> impl Iterator<Item = &mut ModularNet> {
        self.states.iter_mut()
    }

    /// One epoch: every minibatch visits each candidate in turn, first with
    /// the candidate path active, then with it dropped.
    pub fn train_epoch<R: Rng + ?Sized>(&mut self, data: &InstanceBatch, rng: &mut R) -> Result<f64> {
        if self.states.is_empty() || data.is_empty() {
            return Ok(0.0);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let task = self.task;
        let slot = self.slot;
        let with = move |b: Block| matches!(b, Block::Module(m) if m == slot) || b == Block::Structure(task) || b == Block::Head(task);
        let without = move |b: Block| b == Block::Structure(task) || b == Block::Head(task);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size.max(1)) {
            let batch = data.select(chunk);
            for state in &mut self.states {
                total += state.train_step_masked(task, &batch, self.cfg.lr, None, &with)?;
                total += state.train_step_masked(task, &batch, self.cfg.lr, Some(slot), &without)?;
                steps += 2;
            }
        }
        Ok(total / steps as f64)
    }

    /// Picks the best candidate on `val` and writes the result into `net`.
    /// On rejection `net` keeps the trained structure and head of the best
    /// candidate's run minus the candidate column; other tasks are untouched.
    pub fn finish(self, net: &mut ModularNet, val: &InstanceBatch) -> Result<DropoutOutcome> {
        if self.states.is_empty() {
            return Ok(DropoutOutcome::rejected());
        }
        let mut best = 0;
        let mut best_acc = f64::NEG_INFINITY;
        for (i, state) in self.states.iter().enumerate() {
            let acc = state.accuracy_masked(val, self.task, None)?;
            if acc > best_acc {
                best = i;
                best_acc = acc;
            }
        }
        let mut state = self.states.into_iter().nth(best).unwrap();
        let without = state.accuracy_masked(val, self.task, Some(self.slot))?;
        let keep = !self.degenerate && best_acc - without >= self.cfg.keep_threshold - 1e-12;
        if keep {
            state.library_mut()[self.slot].via_dropout = true;
        } else {
            state.pop_module();
        }
        *net = state;
        Ok(DropoutOutcome {
            keep,
            chosen: keep.then_some(self.ids[best]),
            accuracy_with: best_acc,
            accuracy_without: without,
        })
    }
}

/// Runs component dropout for `epochs` epochs and commits the decision.
#[allow(clippy::too_many_arguments)]
pub fn component_dropout_train<R: Rng + ?Sized>(
    net: &mut ModularNet,
    task: TaskId,
    candidates: Vec<Module>,
    epochs: usize,
    train: &InstanceBatch,
    val: &InstanceBatch,
    cfg: DropoutConfig,
    rng: &mut R,
) -> Result<DropoutOutcome> {
    let mut classes: Vec<usize> = train.y.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut cd = ComponentDropout::new(net, task, candidates, cfg, classes.len())?;
    for _ in 0..epochs {
        cd.train_epoch(train, rng)?;
    }
    cd.finish(net, val)
}
