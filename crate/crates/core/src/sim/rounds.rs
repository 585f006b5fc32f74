//! Barrier-synchronized communication rounds. Every round first collects
//! requests, then computes responses against the pre-round state, then
//! applies deliveries.

use std::collections::{BTreeMap, BTreeSet};

use super::World;
use crate::config::DataStrategy;
use crate::error::Result;
use crate::modular::{deserialize_module, Module};
use crate::nn::{normalize_fisher, InstanceBatch, Network, ParamVector, PenaltyTerm};
use crate::rng::{purpose, stream};
use crate::sharing::data::{recv_answer, recv_select_queries, simp_allocate, simp_request, simp_respond, ClassRequest};
use crate::sharing::fed::{fedavg_aggregate, fedfish_aggregate, FedVariant};
use crate::sharing::modmod::{receiver_select_trustmetric, sender_rank_and_offer, ModuleOffer, ReceiverInfo, Selection};
use crate::sharing::{ClassKey, ShareKind};
use crate::sim::agent::AgentNet;
use crate::tasks::{Provenance, TaskSpec};
use crate::{AgentId, TaskId};

/// An instance in flight with its collective class identity.
struct Shipped {
    x: Vec<f32>,
    class: ClassKey,
    /// Task of the query that requested it, if any.
    query_task: Option<TaskId>,
}

/// A sender's stored instances: local replay plus its current training set.
struct Database {
    x: Vec<Vec<f32>>,
    class: Vec<ClassKey>,
}

fn database(world: &World<'_>, j: AgentId) -> Database {
    let agent = &world.agents[j];
    let tasks = &world.stream.agents[j];
    let mut db = Database {
        x: Vec::new(),
        class: Vec::new(),
    };
    let mut add = |spec: &TaskSpec, batch: &InstanceBatch| {
        for i in 0..batch.len() {
            db.x.push(batch.row(i).to_vec());
            db.class.push((spec.family.clone(), spec.labels[batch.y[i]]));
        }
    };
    for spec in &tasks[..agent.position] {
        if let Some(b) = agent.replay.stored(spec.id, Provenance::Local) {
            add(spec, b);
        }
    }
    add(&tasks[agent.position], &tasks[agent.position].train);
    db
}

fn seen_tasks<'a>(world: &World<'a>, i: AgentId) -> &'a [TaskSpec] {
    &world.stream.agents[i][..=world.agents[i].position]
}

fn class_keys(spec: &TaskSpec) -> Vec<ClassKey> {
    spec.labels.iter().map(|c| (spec.family.clone(), *c)).collect()
}

impl World<'_> {
    fn charge(&mut self, kind: ShareKind, from: AgentId, to: AgentId, floats: u64) -> Result<()> {
        let Some(ledger) = self.ledgers.get_mut(&kind) else {
            return Ok(());
        };
        ledger.charge(self.clock, from, to, kind, floats)?;
        ledger.acknowledge(self.clock, from, to, kind, floats);
        self.received_floats[to] += floats;
        Ok(())
    }

    fn remaining(&self, kind: ShareKind, from: AgentId, to: AgentId) -> u64 {
        self.ledgers
            .get(&kind)
            .map(|l| l.remaining(from, to, self.clock))
            .unwrap_or(u64::MAX)
    }

    /// Largest count of `unit`-float items the edge can still carry.
    fn fit(&self, kind: ShareKind, from: AgentId, to: AgentId, unit: u64, want: usize) -> usize {
        if unit == 0 {
            return want;
        }
        want.min((self.remaining(kind, from, to) / unit).min(usize::MAX as u64) as usize)
    }

    pub(super) fn data_round(&mut self) -> Result<()> {
        let budget = self.cfg.data.instance_budget();
        if budget == 0 {
            return Ok(());
        }
        let strategy = match self.cfg.data.strategy {
            DataStrategy::Auto if self.cfg.stream.synthetic.image.is_some() => DataStrategy::Simp,
            DataStrategy::Auto => DataStrategy::Recv,
            s => s,
        };
        let fpi = self.floats_per_instance;
        let n = self.agents.len();

        // requests against pre-round state
        let mut queries: Vec<Vec<(TaskId, Vec<f32>)>> = vec![Vec::new(); n];
        let mut requests: Vec<Option<ClassRequest>> = vec![None; n];
        for i in 0..n {
            if self.topology.neighbors(i).is_empty() {
                continue;
            }
            let view = self.agents[i].view();
            let seen = seen_tasks(self, i);
            match strategy {
                DataStrategy::Recv => {
                    let vals: Vec<(TaskId, &InstanceBatch)> = seen.iter().map(|t| (t.id, &t.val)).collect();
                    let sel = recv_select_queries(view, &vals, self.cfg.data.q)?;
                    if sel.truncated {
                        self.note(ShareKind::Data, "recv_queries_truncated", 1);
                    }
                    queries[i] = sel
                        .picks
                        .into_iter()
                        .map(|(t, idx)| {
                            let spec = seen.iter().find(|s| s.id == t).unwrap();
                            (t, spec.val.row(idx).to_vec())
                        })
                        .collect();
                }
                _ => {
                    let info: Vec<(TaskId, &InstanceBatch, Vec<ClassKey>)> =
                        seen.iter().map(|t| (t.id, &t.val, class_keys(t))).collect();
                    requests[i] = Some(simp_request(i, view, &info, budget)?);
                }
            }
        }

        // responses
        let mut dbs: BTreeMap<AgentId, (Database, Vec<Vec<f32>>)> = BTreeMap::new();
        let mut deliveries: Vec<(AgentId, AgentId, Vec<Shipped>)> = Vec::new();
        for i in 0..n {
            for j in self.topology.neighbors(i) {
                if let std::collections::btree_map::Entry::Vacant(e) = dbs.entry(j) {
                    let db = database(self, j);
                    let sender = &self.agents[j];
                    let task = self.stream.agents[j][sender.position].id;
                    let feats = db
                        .x
                        .iter()
                        .map(|x| sender.view().forward_one(x, task).map(|o| o.1))
                        .collect::<Result<Vec<_>>>()?;
                    e.insert((db, feats));
                }
                let (db, feats) = &dbs[&j];
                let mut shipped = Vec::new();
                match strategy {
                    DataStrategy::Recv => {
                        let n_q = self.fit(ShareKind::Data, i, j, fpi, queries[i].len());
                        if n_q == 0 {
                            continue;
                        }
                        self.charge(ShareKind::Data, i, j, n_q as u64 * fpi)?;
                        self.note(ShareKind::Data, "recv_queries", n_q as u64);
                        let sender = &self.agents[j];
                        let task = self.stream.agents[j][sender.position].id;
                        for (qt, x) in &queries[i][..n_q] {
                            let f = sender.view().forward_one(x, task)?.1;
                            for idx in recv_answer(&f, feats, self.cfg.data.k) {
                                shipped.push(Shipped {
                                    x: db.x[idx].clone(),
                                    class: db.class[idx].clone(),
                                    query_task: Some(*qt),
                                });
                            }
                        }
                    }
                    _ => {
                        let Some(req) = &requests[i] else { continue };
                        let mut pool: BTreeMap<ClassKey, Vec<usize>> = BTreeMap::new();
                        for (idx, c) in db.class.iter().enumerate() {
                            pool.entry(c.clone()).or_default().push(idx);
                        }
                        let classes: BTreeSet<ClassKey> = pool.keys().cloned().collect();
                        let alloc = simp_allocate(req, &classes);
                        let mut rng = stream(self.seed, &[purpose::SHARING, self.round, i as u64, j as u64]);
                        for (class, idx) in simp_respond(&alloc, &pool, &mut rng) {
                            shipped.push(Shipped {
                                x: db.x[idx].clone(),
                                class,
                                query_task: None,
                            });
                        }
                        let classes = req.classes.len() as u64;
                        self.note(ShareKind::Data, "simp_request_classes", classes);
                    }
                }
                let keep = self.fit(ShareKind::Data, j, i, fpi, shipped.len().min(budget));
                shipped.truncate(keep);
                self.charge(ShareKind::Data, j, i, shipped.len() as u64 * fpi)?;
                self.note(ShareKind::Data, "labels", shipped.len() as u64);
                deliveries.push((j, i, shipped));
            }
        }

        // deliveries
        for (_, i, shipped) in deliveries {
            let seen: Vec<TaskSpec> = seen_tasks(self, i).to_vec();
            let current = seen.last().unwrap().id;
            let agent = &mut self.agents[i];
            for item in shipped {
                let owner = |t: &TaskSpec| t.family == item.class.0 && t.labels.contains(&item.class.1);
                let preferred = item.query_task.unwrap_or(current);
                let Some(spec) = seen
                    .iter()
                    .find(|t| t.id == preferred && owner(t))
                    .or_else(|| seen.iter().find(|t| owner(t)))
                else {
                    continue;
                };
                let label = spec.local_label(item.class.1).unwrap();
                if spec.id == current {
                    agent.received.push(&item.x, label);
                }
                agent
                    .replay
                    .insert(spec.id, &item.x, label, Provenance::Received, &mut agent.rng);
            }
        }
        Ok(())
    }

    pub(super) fn fed_round(&mut self, variant: FedVariant) -> Result<()> {
        let n = self.agents.len();
        let current = |w: &World, i: AgentId| w.stream.agents[i][w.agents[i].position].id;
        let snapshots: Vec<ParamVector> = (0..n)
            .map(|i| self.agents[i].net.as_dyn().shared_params(Some(current(self, i))))
            .collect();
        let mut updates: Vec<(AgentId, ParamVector, Vec<AgentId>)> = Vec::new();
        for i in 0..n {
            let mut senders = Vec::new();
            for j in self.topology.neighbors(i) {
                let cost = variant.round_cost(snapshots[j].floats());
                if self.remaining(ShareKind::Fed, j, i) >= cost {
                    self.charge(ShareKind::Fed, j, i, cost)?;
                    senders.push(j);
                }
            }
            if senders.is_empty() {
                continue;
            }
            let others: Vec<&ParamVector> = senders.iter().map(|j| &snapshots[*j]).collect();
            let merged = match variant {
                FedVariant::FedFish => {
                    let d: Vec<f32> = match (self.cfg.fed.importance, &self.agents[i].fisher) {
                        (Some(v), _) => vec![v; snapshots[i].len()],
                        (None, Some(f)) => normalize_fisher(f).values().to_vec(),
                        (None, None) => vec![1.0; snapshots[i].len()],
                    };
                    fedfish_aggregate(&snapshots[i], &d, &others)?
                }
                _ => fedavg_aggregate(&snapshots[i], &others)?,
            };
            updates.push((i, merged, senders));
        }
        for (i, merged, senders) in updates {
            let task = current(self, i);
            let penalty = match variant {
                FedVariant::FedProx => Some(PenaltyTerm::Proximal {
                    anchor: merged.clone(),
                    mu: self.cfg.fed.mu,
                }),
                FedVariant::FedCurv => Some(PenaltyTerm::Curvature {
                    snapshots: senders
                        .iter()
                        .map(|j| {
                            let fisher = self.agents[*j]
                                .fisher
                                .clone()
                                .unwrap_or_else(|| crate::nn::FisherDiag::constant(snapshots[*j].len(), 0.0));
                            (snapshots[*j].clone(), fisher)
                        })
                        .collect(),
                    mu: self.cfg.fed.mu,
                }),
                _ => None,
            };
            let agent = &mut self.agents[i];
            agent.net.as_dyn_mut().set_shared_params(Some(task), &merged)?;
            if let Some(cd) = agent.dropout.as_mut() {
                for net in cd.nets_mut() {
                    net.set_shared_params(Some(task), &merged)?;
                }
            }
            if penalty.is_some() {
                agent.penalty = penalty;
            }
        }
        Ok(())
    }

    /// Offers for every receiver's upcoming task at `position`.
    pub(super) fn modmod_round(&mut self, position: usize) -> Result<()> {
        let metric = self.cfg.modmod.metric_for(&self.cfg.stream.kind);
        let fpi = self.floats_per_instance;
        let n = self.agents.len();
        let mut chosen: Vec<(AgentId, Vec<Module>)> = Vec::new();
        for i in 0..n {
            let neighbors = self.topology.neighbors(i);
            if neighbors.is_empty() {
                continue;
            }
            let Some(AgentNet::Modular(own)) = Some(&self.agents[i].net) else {
                continue;
            };
            let width = own.width();
            let next = &self.stream.agents[i][position];
            let info = match metric {
                crate::sharing::modmod::Metric::Iou => ReceiverInfo::Labels(class_keys(next).into_iter().collect()),
                crate::sharing::modmod::Metric::Leep => {
                    let take: Vec<usize> = (0..next.val.len().min(self.cfg.modmod.probe)).collect();
                    ReceiverInfo::Probe(next.val.select(&take))
                }
            };
            let mut offers: Vec<ModuleOffer> = Vec::new();
            for j in neighbors.iter().copied() {
                if let ReceiverInfo::Probe(p) = &info {
                    let want = self.fit(ShareKind::Modmod, i, j, fpi, p.len());
                    if want < p.len() {
                        continue;
                    }
                    self.charge(ShareKind::Modmod, i, j, p.len() as u64 * fpi)?;
                    self.note(ShareKind::Modmod, "leep_probe_labels", p.len() as u64);
                }
                let AgentNet::Modular(sender_net) = &self.agents[j].net else {
                    continue;
                };
                let past: Vec<(TaskId, BTreeSet<ClassKey>)> = self.stream.agents[j][..position]
                    .iter()
                    .map(|t| (t.id, class_keys(t).into_iter().collect()))
                    .collect();
                let mut offer =
                    sender_rank_and_offer(j, i, self.round, sender_net, &past, &info, self.cfg.modmod.k)?;
                let mut room = self.remaining(ShareKind::Modmod, j, i);
                offer.modules.retain(|(p, _)| {
                    let fits = p.floats() <= room;
                    if fits {
                        room -= p.floats();
                    }
                    fits
                });
                self.charge(ShareKind::Modmod, j, i, offer.floats())?;
                self.note(ShareKind::Modmod, "modmod_scores", offer.modules.len() as u64);
                offers.push(offer);
            }
            let offered: usize = offers.iter().map(|o| o.modules.len()).sum();
            if offered == 0 {
                continue;
            }
            let modules = match self.cfg.modmod.selection_for(neighbors.len()) {
                Selection::TrustMetric => {
                    let (sender, id) = receiver_select_trustmetric(&offers)?;
                    let offer = offers.iter().find(|o| o.sender == sender).unwrap();
                    let (payload, _) = offer.modules.iter().find(|(_, s)| s.module == id).unwrap();
                    vec![deserialize_module(payload, width)?]
                }
                Selection::TryOut => offers
                    .iter()
                    .flat_map(|o| o.modules.iter())
                    .map(|(p, _)| deserialize_module(p, width))
                    .collect::<Result<Vec<_>>>()?,
            };
            chosen.push((i, modules));
        }
        for (i, modules) in chosen {
            self.agents[i].offered = modules;
        }
        Ok(())
    }
}
