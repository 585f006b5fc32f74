//! One learner: its net, replay buffer, RNG stream and per-task state.

use rand::seq::SliceRandom;

use crate::config::{ExperimentConfig, NetKind};
use crate::error::{DclError, Result};
use crate::modular::{ComponentDropout, DropoutConfig, Module, ModularNet};
use crate::nn::{
    accuracy, estimate_fisher_multi, per_instance_loss, train_step, Block, FisherDiag, InstanceBatch, LayerKind,
    MonolithicNet, Network, PenaltyTerm,
};
use crate::rng::{purpose, stream, SimRng};
use crate::tasks::{Provenance, ReplayBuffer, TaskSpec};
use crate::{AgentId, TaskId};

#[derive(Debug, Clone)]
pub enum AgentNet {
    Mono(MonolithicNet),
    Modular(ModularNet),
}

impl AgentNet {
    pub fn as_dyn(&self) -> &dyn Network {
        match self {
            AgentNet::Mono(n) => n,
            AgentNet::Modular(n) => n,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Network {
        match self {
            AgentNet::Mono(n) => n,
            AgentNet::Modular(n) => n,
        }
    }

    pub fn modular(&self) -> Option<&ModularNet> {
        match self {
            AgentNet::Modular(n) => Some(n),
            AgentNet::Mono(_) => None,
        }
    }
}

/// Encoder or trunk layers for the configured net and instance shape.
pub fn front_layers(cfg: &ExperimentConfig, task: &TaskSpec, out: usize) -> Vec<LayerKind> {
    let dim = task.shape.floats();
    match cfg.net.conv {
        Some(conv) => {
            let c = LayerKind::ConvLite {
                channels_in: task.shape.channels,
                channels_out: conv.channels,
                kernel: conv.kernel,
                height: task.shape.height,
                width: task.shape.width,
            };
            let flat = c.output_dim();
            vec![c, LayerKind::dense(flat, out)]
        }
        None => vec![LayerKind::dense(dim, out)],
    }
}

/// Builds the collective's shared initialization; every agent starts from
/// the same trunk, encoder and basis modules.
pub fn initial_net(cfg: &ExperimentConfig, seed: u64, first: &TaskSpec, agent: AgentId) -> Result<AgentNet> {
    let mut rng = stream(seed, &[purpose::SHARED_INIT]);
    let dim = first.shape.floats();
    match cfg.net.kind {
        NetKind::Monolithic => {
            let mut layers = Vec::new();
            let mut prev = dim;
            for (i, &h) in cfg.net.hidden.iter().enumerate() {
                if i == 0 && cfg.net.conv.is_some() {
                    layers.extend(front_layers(cfg, first, h));
                } else {
                    layers.push(LayerKind::dense(prev, h));
                }
                prev = h;
            }
            Ok(AgentNet::Mono(MonolithicNet::new(dim, layers, &mut rng)?))
        }
        NetKind::Modular => {
            let direct = !cfg.net.encoder && cfg.net.conv.is_none() && dim == cfg.net.width;
            let encoder = if direct {
                Vec::new()
            } else {
                front_layers(cfg, first, cfg.net.width)
            };
            let net = ModularNet::new(
                dim,
                encoder,
                cfg.net.width,
                cfg.net.depth,
                cfg.net.basis,
                agent as u16,
                &mut rng,
            )?;
            Ok(AgentNet::Modular(net))
        }
    }
}

pub struct Agent {
    pub id: AgentId,
    pub net: AgentNet,
    pub replay: ReplayBuffer,
    pub rng: SimRng,
    /// Index of the task being learned.
    pub position: usize,
    /// Received instances of the current task.
    pub received: InstanceBatch,
    pub penalty: Option<PenaltyTerm>,
    /// Raw Fisher diagonal of the shared view, refreshed at task ends.
    pub fisher: Option<FisherDiag>,
    pub dropout: Option<ComponentDropout>,
    /// Modules offered by neighbors for the upcoming component dropout.
    pub offered: Vec<Module>,
    /// Library slot of a module kept during the current task.
    pub kept_slot: Option<usize>,
}

impl Agent {
    pub fn new(id: AgentId, net: AgentNet, dim: usize, cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            id,
            net,
            replay: ReplayBuffer::new(dim, cfg.train.replay_capacity),
            rng: stream(seed, &[purpose::AGENT_TRAIN, id as u64]),
            position: 0,
            received: InstanceBatch::new(dim),
            penalty: None,
            fisher: None,
            dropout: None,
            offered: Vec::new(),
            kept_slot: None,
        }
    }

    /// The net whose predictions currently represent this agent.
    pub fn view(&self) -> &dyn Network {
        match (&self.net, &self.dropout) {
            (AgentNet::Modular(_), Some(cd)) => cd.preview().map(|n| n as &dyn Network).unwrap_or(self.net.as_dyn()),
            _ => self.net.as_dyn(),
        }
    }

    pub fn begin_task(&mut self, task: &TaskSpec) {
        let classes = task.classes();
        match &mut self.net {
            AgentNet::Mono(n) => n.add_task(task.id, classes, &mut self.rng),
            AgentNet::Modular(n) => n.add_task(task.id, classes, &mut self.rng),
        }
        self.received = InstanceBatch::new(task.train.dim);
        self.penalty = None;
        self.dropout = None;
        self.kept_slot = None;
    }

    fn pool(&self, task: &TaskSpec) -> InstanceBatch {
        let mut pool = task.train.clone();
        pool.extend(&self.received);
        pool
    }

    fn dropout_config(cfg: &ExperimentConfig) -> DropoutConfig {
        DropoutConfig {
            keep_threshold: cfg.train.keep_threshold / 100.0,
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
        }
    }

    /// Trains one epoch of the current task. `epoch` is 1-based within the task.
    pub fn train_epoch(&mut self, cfg: &ExperimentConfig, tasks: &[TaskSpec], epoch: usize) -> Result<()> {
        let task = &tasks[self.position];
        let pool = self.pool(task);
        let modular_cd = matches!(self.net, AgentNet::Modular(_))
            && self.position >= cfg.net.init_tasks.max(1)
            && epoch <= cfg.train.dropout_epochs;
        if modular_cd {
            return self.dropout_epoch(cfg, tasks, epoch, &pool);
        }
        let trainable = self.trainable(self.position < cfg.net.init_tasks.max(1));
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch = pool.select(chunk);
            let replayed = if cfg.train.replay_batch > 0 && !self.replay.is_empty() {
                self.replay.sample(None, cfg.train.replay_batch, &mut self.rng)?
            } else {
                Vec::new()
            };
            let mut groups: Vec<(TaskId, &InstanceBatch)> = vec![(task.id, &batch)];
            groups.extend(replayed.iter().map(|(t, b)| (*t, b)));
            train_step(
                self.net.as_dyn_mut(),
                &groups,
                cfg.train.lr,
                self.penalty.as_ref(),
                Some(task.id),
                &*trainable,
            )?;
        }
        Ok(())
    }

    /// Basis modules and the encoder learn only during the initialization
    /// tasks; afterwards only a module kept in the current task is trainable.
    /// Structures and heads of every seen task train on current + replay batches.
    fn trainable(&self, init: bool) -> Box<dyn Fn(Block) -> bool + Send + Sync> {
        match &self.net {
            AgentNet::Mono(_) => Box::new(|_| true),
            AgentNet::Modular(net) => {
                let basis = net.n_basis();
                let kept = self.kept_slot;
                Box::new(move |b| match b {
                    Block::Module(m) => (init && m < basis) || Some(m) == kept,
                    Block::Structure(_) | Block::Head(_) => true,
                    Block::Encoder => false,
                    Block::Trunk => false,
                })
            }
        }
    }

    fn dropout_epoch(
        &mut self,
        cfg: &ExperimentConfig,
        tasks: &[TaskSpec],
        epoch: usize,
        pool: &InstanceBatch,
    ) -> Result<()> {
        let task = &tasks[self.position];
        let AgentNet::Modular(net) = &mut self.net else {
            unreachable!()
        };
        if self.dropout.is_none() {
            let mut candidates = std::mem::take(&mut self.offered);
            candidates.push(net.fresh_module(task.id, &mut self.rng));
            let mut classes = pool.y.clone();
            classes.sort_unstable();
            classes.dedup();
            self.dropout = Some(ComponentDropout::new(
                net,
                task.id,
                candidates,
                Self::dropout_config(cfg),
                classes.len(),
            )?);
        }
        self.dropout.as_mut().unwrap().train_epoch(pool, &mut self.rng)?;
        if epoch == cfg.train.dropout_epochs {
            let cd = self.dropout.take().unwrap();
            let slot = net.library().len();
            let outcome = cd.finish(net, &task.val)?;
            if outcome.keep {
                let fresh_origin = net.origin();
                let module = &net.library()[slot];
                if module.id.origin != fresh_origin || module.id.birth_task != task.id.0 as u16 {
                    let id = net.next_module_id(task.id);
                    net.library_mut()[slot].id = id;
                }
                self.kept_slot = Some(slot);
                self.refit_past_structures(cfg, task.id)?;
            }
        }
        Ok(())
    }

    /// After a module joins the library, past tasks' structure weights get
    /// one epoch on replay so they can adopt or ignore it.
    fn refit_past_structures(&mut self, cfg: &ExperimentConfig, current: TaskId) -> Result<()> {
        if self.replay.is_empty() {
            return Ok(());
        }
        let mut batches: Vec<(TaskId, InstanceBatch)> = self
            .replay
            .tasks()
            .into_iter()
            .filter(|t| *t != current)
            .map(|t| (t, self.replay.task_batch(t)))
            .collect();
        for (_, b) in &mut batches {
            let mut idx: Vec<usize> = (0..b.len()).collect();
            idx.shuffle(&mut self.rng);
            *b = b.select(&idx);
        }
        let only_structures = move |b: Block| matches!(b, Block::Structure(t) if t != current);
        let longest = batches.iter().map(|(_, b)| b.len()).max().unwrap_or(0);
        let bs = cfg.train.batch_size;
        let mut start = 0;
        while start < longest {
            let chunks: Vec<(TaskId, InstanceBatch)> = batches
                .iter()
                .filter(|(_, b)| start < b.len())
                .map(|(t, b)| {
                    let end = (start + bs).min(b.len());
                    (*t, b.select(&(start..end).collect::<Vec<_>>()))
                })
                .collect();
            let groups: Vec<(TaskId, &InstanceBatch)> = chunks.iter().map(|(t, b)| (*t, b)).collect();
            train_step(self.net.as_dyn_mut(), &groups, cfg.train.lr, None, None, &only_structures)?;
            start += bs;
        }
        Ok(())
    }

    /// Stores the finished task in replay and refreshes the Fisher diagonal.
    pub fn end_task(&mut self, task: &TaskSpec, need_fisher: bool) -> Result<()> {
        self.replay
            .insert_batch(task.id, &task.train, Provenance::Local, &mut self.rng);
        if need_fisher {
            let mut groups: Vec<(TaskId, InstanceBatch)> = self
                .replay
                .tasks()
                .into_iter()
                .map(|t| (t, self.replay.task_batch(t)))
                .collect();
            groups.push((task.id, task.val.clone()));
            let refs: Vec<(TaskId, &InstanceBatch)> = groups.iter().map(|(t, b)| (*t, b)).collect();
            self.fisher = Some(estimate_fisher_multi(self.net.as_dyn(), &refs, Some(task.id))?);
        }
        Ok(())
    }

    /// Test accuracy (percent) of every seen task, in stream order.
    pub fn task_accuracies(&self, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
        tasks[..=self.position]
            .iter()
            .map(|t| accuracy(self.view(), &t.test, t.id).map(|a| 100.0 * a))
            .collect()
    }

    /// Mean test cross-entropy on each seen task.
    pub fn task_losses(&self, tasks: &[TaskSpec]) -> Result<Vec<(TaskId, f64)>> {
        tasks[..=self.position]
            .iter()
            .map(|t| {
                let l = per_instance_loss(self.view(), &t.test, t.id)?;
                if l.is_empty() {
                    return Err(DclError::Empty("test set"));
                }
                Ok((t.id, l.iter().sum::<f64>() / l.len() as f64))
            })
            .collect()
    }
}
