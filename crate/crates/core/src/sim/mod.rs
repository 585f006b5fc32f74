//! The simulation loop: agents learn their task streams in lockstep and
//! exchange knowledge at barrier-synchronized rounds.

pub mod agent;
pub mod metrics;
mod rounds;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{Allowance, CostLedger};
use crate::config::{ExperimentConfig, StreamKind, TopologyKind};
use crate::error::{DclError, Result};
use crate::sharing::fed::FedVariant;
use crate::sharing::ShareKind;
use crate::tasks::{gen_combined_stream, gen_dataset_stream, gen_synthetic_stream, load_idx, TaskStream};
use crate::topology::{gen_complete, gen_erdos_renyi, gen_ring, gen_server, gen_tree, EdgeMeta, Topology};
use crate::{AgentId, TaskId};
use agent::{initial_net, Agent};
use metrics::{collective_objective, evaluate_seen_tasks, mean_se};

/// How agents' epochs are scheduled between barriers. Both produce
/// bit-identical records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// One evaluation checkpoint of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub seed: u64,
    pub agent: AgentId,
    /// 1-based position in the agent's stream.
    pub task: usize,
    /// 1-based epoch within the task.
    pub epoch: usize,
    /// Mean test accuracy (percent) over the tasks seen so far.
    pub accuracy: f64,
    /// Cumulative floats received by this agent.
    pub budget: u64,
    pub task_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rows: Vec<RecordRow>,
    /// Mean over agents of the last checkpoint accuracy.
    pub final_accuracy: f64,
    /// Mean of every checkpoint accuracy.
    pub auc: f64,
    pub total_floats: u64,
    /// Ledger total divided by the number of directed edges.
    pub budget_per_edge: f64,
    pub collective_objective: f64,
    #[serde(skip)]
    pub ledgers: BTreeMap<ShareKind, CostLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub mode: crate::config::Mode,
    pub seeds: Vec<u64>,
    pub final_accuracy: f64,
    pub final_accuracy_se: f64,
    pub auc: f64,
    pub auc_se: f64,
    pub total_floats: f64,
    pub budget_per_edge: f64,
    pub collective_objective: f64,
    pub failures: Vec<SeedFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
}

impl RunRecord {
    pub fn rows(&self) -> impl Iterator<Item = &RecordRow> {
        self.seeds.iter().flat_map(|s| s.rows.iter())
    }

    pub fn summary(&self) -> RunSummary {
        let pick = |f: fn(&SeedResult) -> f64| self.seeds.iter().map(f).collect::<Vec<_>>();
        let rows: Vec<RecordRow> = self.rows().cloned().collect();
        let (final_accuracy, final_accuracy_se) = mean_se(&per_agent_final(&rows));
        let (auc, auc_se) = mean_se(&per_agent_auc(&rows));
        RunSummary {
            name: self.config.name.clone(),
            config_hash: self.config.hash(),
            mode: self.config.mode,
            seeds: self.seeds.iter().map(|s| s.seed).collect(),
            final_accuracy,
            final_accuracy_se,
            auc,
            auc_se,
            total_floats: mean_se(&pick(|s| s.total_floats as f64)).0,
            budget_per_edge: mean_se(&pick(|s| s.budget_per_edge)).0,
            collective_objective: mean_se(&pick(|s| s.collective_objective)).0,
            failures: self.failures.clone(),
        }
    }
}

/// Last checkpoint accuracy of every (seed, agent) pair, in key order.
pub fn per_agent_final(rows: &[RecordRow]) -> Vec<f64> {
    let mut last: BTreeMap<(u64, AgentId), &RecordRow> = BTreeMap::new();
    for r in rows {
        let e = last.entry((r.seed, r.agent)).or_insert(r);
        if (r.task, r.epoch) >= (e.task, e.epoch) {
            *e = r;
        }
    }
    last.values().map(|r| r.accuracy).collect()
}

/// Mean checkpoint accuracy of every (seed, agent) pair, in key order.
pub fn per_agent_auc(rows: &[RecordRow]) -> Vec<f64> {
    let mut sums: BTreeMap<(u64, AgentId), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = sums.entry((r.seed, r.agent)).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    match cfg.stream.kind {
        StreamKind::Synthetic => gen_synthetic_stream(&cfg.stream.synthetic, seed),
        StreamKind::Combined => gen_combined_stream(&cfg.stream.synthetic, seed),
        StreamKind::Idx => {
            let (Some(images), Some(labels)) = (&cfg.stream.images, &cfg.stream.labels) else {
                return Err(DclError::Config("idx stream needs images and labels paths".into()));
            };
            let data = load_idx(images, labels)?;
            let name = images
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into());
            gen_dataset_stream(&name, &data, &cfg.stream.synthetic, seed)
        }
    }
}

pub fn build_topology(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Topology> {
    let t = &cfg.topology;
    let topo = match t.kind {
        TopologyKind::Complete => gen_complete(n)?,
        TopologyKind::Ring => gen_ring(n)?,
        TopologyKind::Server => gen_server(n)?,
        TopologyKind::Tree => gen_tree(n)?,
        TopologyKind::ErdosRenyi => gen_erdos_renyi(n, t.p, seed)?,
        TopologyKind::Empty => Topology::empty(n),
        TopologyKind::File => {
            let path = t.path.as_ref().ok_or_else(|| DclError::Config("file topology needs a path".into()))?;
            return Topology::load_edge_list(n, path);
        }
    };
    Ok(topo.with_uniform(EdgeMeta {
        budget: cfg.budget.edge_budget,
        frequency: cfg.budget.edge_frequency,
    }))
}

/// Shared state of one seed's simulation.
pub(crate) struct World<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    stream: &'a TaskStream,
    topology: Topology,
    agents: Vec<Agent>,
    ledgers: BTreeMap<ShareKind, CostLedger>,
    received_floats: Vec<u64>,
    clock: u64,
    round: u64,
    floats_per_instance: u64,
}

impl World<'_> {
    fn note(&mut self, kind: ShareKind, key: &str, count: u64) {
        if let Some(l) = self.ledgers.get_mut(&kind) {
            l.note(key, count);
        }
    }

    fn train_epochs(&mut self, exec: Execution, epoch: usize) -> Result<()> {
        let cfg = self.cfg;
        let stream = self.stream;
        let step = |a: &mut Agent| a.train_epoch(cfg, &stream.agents[a.id], epoch);
        match exec {
            Execution::Sequential => self.agents.iter_mut().try_for_each(step),
            Execution::Parallel => self.agents.par_iter_mut().try_for_each(step),
        }
    }

    fn checkpoint(&self, exec: Execution, epoch: usize) -> Result<Vec<RecordRow>> {
        let eval = |a: &Agent| -> Result<RecordRow> {
            let task_accuracies = a.task_accuracies(&self.stream.agents[a.id])?;
            Ok(RecordRow {
                seed: self.seed,
                agent: a.id,
                task: a.position + 1,
                epoch,
                accuracy: evaluate_seen_tasks(&task_accuracies)?,
                budget: self.received_floats[a.id],
                task_accuracies,
            })
        };
        match exec {
            Execution::Sequential => self.agents.iter().map(eval).collect(),
            Execution::Parallel => self.agents.par_iter().map(eval).collect(),
        }
    }
}

fn share_kinds(cfg: &ExperimentConfig) -> Vec<ShareKind> {
    let mut kinds = Vec::new();
    if cfg.mode.uses_data() {
        kinds.push(ShareKind::Data);
    }
    if cfg.mode.fed_variant(cfg.fed.variant).is_some() {
        kinds.push(ShareKind::Fed);
    }
    if cfg.mode.uses_modmod() {
        kinds.push(ShareKind::Modmod);
    }
    kinds
}

/// Runs a single seed to completion.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, exec: Execution) -> Result<SeedResult> {
    cfg.validate()?;
    let stream = build_stream(cfg, seed)?;
    let n = stream.agents.len();
    let tasks = stream.agents.first().map(|a| a.len()).unwrap_or(0);
    if n == 0 || tasks == 0 || stream.agents.iter().any(|a| a.len() != tasks) {
        return Err(DclError::InvalidArgument("every agent needs the same number of tasks".into()));
    }
    let topology = build_topology(cfg, n, seed)?;
    let first = &stream.agents[0][0];
    let dim = first.train.dim;
    let agents = (0..n)
        .map(|i| Ok(Agent::new(i, initial_net(cfg, seed, &stream.agents[i][0], i)?, dim, cfg, seed)))
        .collect::<Result<Vec<_>>>()?;
    let allowance = Allowance {
        edges: topology
            .edges()
            .map(|(e, m)| (e, (m.budget, m.frequency)))
            .collect(),
    };
    let ledgers = share_kinds(cfg)
        .into_iter()
        .map(|k| {
            let l = if cfg.budget.enforce {
                CostLedger::enforcing(allowance.clone())
            } else {
                CostLedger::audit()
            };
            (k, l)
        })
        .collect();
    let mut world = World {
        cfg,
        seed,
        stream: &stream,
        topology,
        agents,
        ledgers,
        received_floats: vec![0; n],
        clock: 0,
        round: 0,
        floats_per_instance: first.shape.floats() as u64,
    };

    let fed = cfg.mode.fed_variant(cfg.fed.variant);
    let need_fisher = matches!(fed, Some(FedVariant::FedCurv | FedVariant::FedFish));
    let mut global_epoch = 0usize;
    let mut rows = Vec::new();
    for pos in 0..tasks {
        world.clock += 1;
        if pos > 0 && cfg.mode.uses_modmod() {
            world.round += 1;
            world.modmod_round(pos)?;
        }
        for a in &mut world.agents {
            a.position = pos;
            a.begin_task(&stream.agents[a.id][pos]);
        }
        for epoch in 1..=cfg.train.epochs_per_task {
            world.train_epochs(exec, epoch)?;
            global_epoch += 1;
            if cfg.mode.uses_data() && global_epoch.is_multiple_of(cfg.data.frequency) {
                world.round += 1;
                world.data_round()?;
            }
            if let Some(v) = fed {
                if global_epoch.is_multiple_of(cfg.fed.frequency) {
                    world.round += 1;
                    world.fed_round(v)?;
                }
            }
            if epoch % cfg.train.eval_period == 0 {
                rows.extend(world.checkpoint(exec, epoch)?);
            }
        }
        for a in &mut world.agents {
            a.end_task(&stream.agents[a.id][pos], need_fisher)?;
        }
    }
    for l in world.ledgers.values() {
        l.check_conservation()?;
    }

    let losses = world
        .agents
        .iter()
        .map(|a| Ok(a.task_losses(&stream.agents[a.id])?.into_iter().collect()))
        .collect::<Result<Vec<BTreeMap<TaskId, f64>>>>()?;
    let streams: Vec<Vec<TaskId>> = stream.agents.iter().map(|a| a.iter().map(|t| t.id).collect()).collect();
    let objective = collective_objective(&streams, &losses)?;

    let last: Vec<f64> = (0..n)
        .filter_map(|i| rows.iter().rev().find(|r| r.agent == i).map(|r| r.accuracy))
        .collect();
    let total_floats: u64 = world.ledgers.values().map(|l| l.total()).sum();
    let edges = world.topology.edge_count();
    Ok(SeedResult {
        seed,
        final_accuracy: mean_se(&last).0,
        auc: mean_se(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>()).0,
        total_floats,
        budget_per_edge: if edges == 0 { 0.0 } else { total_floats as f64 / edges as f64 },
        collective_objective: objective,
        rows,
        ledgers: world.ledgers,
    })
}

/// Runs every configured seed. A failing seed is recorded and skipped.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<RunRecord> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for seed in cfg.seeds.list() {
        match run_seed(cfg, seed, exec) {
            Ok(r) => seeds.push(r),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(RunRecord {
        config: cfg.clone(),
        seeds,
        failures,
    })
}
