//! Module sharing: transferability scores, sender-side offers and
//! receiver-side selection.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClassKey;
use crate::error::{DclError, Result};
use crate::modular::{component_dropout_train, serialize_module, DropoutConfig, DropoutOutcome, Module, ModuleId, ModularNet};
use crate::nn::{softmax, InstanceBatch, Network};
use crate::payload::Payload;
use crate::{AgentId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Leep,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TrustMetric,
    TryOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub sender: AgentId,
    pub module: ModuleId,
    pub source_task: TaskId,
    pub score: f64,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleOffer {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub round: u64,
    pub modules: Vec<(Payload, TransferScore)>,
}

impl ModuleOffer {
    pub fn floats(&self) -> u64 {
        self.modules.iter().map(|(p, _)| p.floats()).sum()
    }
}

/// What the receiver publishes about its upcoming task.
#[derive(Debug, Clone, PartialEq)]
pub enum ReceiverInfo {
    Labels(BTreeSet<ClassKey>),
    /// Probe instances with the receiver's local labels.
    Probe(InstanceBatch),
}

impl ReceiverInfo {
    pub fn metric(&self) -> Metric {
        match self {
            ReceiverInfo::Labels(_) => Metric::Iou,
            ReceiverInfo::Probe(_) => Metric::Leep,
        }
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 0.
pub fn iou_score<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// LEEP of a source model on target data, from the source-label
/// distributions `probs[x][y_i]` and the target labels.
pub fn leep_score(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = probs.len();
    if n == 0 || labels.len() != n {
        return Err(DclError::Empty("LEEP target sample"));
    }
    let z = probs[0].len();
    let ny = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0.0f64; ny * z];
    for (p, y) in probs.iter().zip(labels) {
        for (i, pi) in p.iter().enumerate() {
            joint[y * z + i] += pi / n as f64;
        }
    }
    let marginal: Vec<f64> = (0..z).map(|i| (0..ny).map(|y| joint[y * z + i]).sum()).collect();
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        let mut inner = 0.0;
        for i in 0..z {
            if marginal[i] > 0.0 {
                inner += joint[y * z + i] / marginal[i] * p[i];
            }
        }
        total += inner.ln();
    }
    Ok(total / n as f64)
}

/// LEEP of `net`'s head for `source_task` on the probe batch.
pub fn leep_of_task<N: Network + ?Sized>(net: &N, source_task: TaskId, probe: &InstanceBatch) -> Result<f64> {
    let probs = (0..probe.len())
        .map(|i| {
            let (logits, _) = net.forward_one(probe.row(i), source_task)?;
            Ok(softmax(&logits).into_iter().map(|v| v as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    leep_score(&probs, &probe.y)
}

/// Keeps the `k` highest scores; ties go to the earlier source task, then
/// the lower module serial.
pub fn rank_top_k(mut scores: Vec<TransferScore>, k: usize) -> Vec<TransferScore> {
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.source_task.cmp(&b.source_task))
            .then(a.module.serial.cmp(&b.module.serial))
    });
    scores.truncate(k);
    scores
}

/// Modules of `net` that the sender grew itself through component dropout,
/// paired with the task that grew them.
pub fn eligible_modules(net: &ModularNet, sender: AgentId) -> Vec<(TaskId, &Module)> {
    net.library()
        .iter()
        .filter(|m| m.via_dropout && m.id.origin as usize == sender)
        .map(|m| (TaskId(m.id.birth_task as u32), m))
        .collect()
}

/// Scores every past task that grew a module and offers the top `k`.
/// `tasks` lists the sender's past tasks with their label sets.
pub fn sender_rank_and_offer(
    sender: AgentId,
    receiver: AgentId,
    round: u64,
    net: &ModularNet,
    tasks: &[(TaskId, BTreeSet<ClassKey>)],
    info: &ReceiverInfo,
    k: usize,
) -> Result<ModuleOffer> {
    let mut scores = Vec::new();
    for (task, module) in eligible_modules(net, sender) {
        let Some((_, labels)) = tasks.iter().find(|(t, _)| *t == task) else {
            continue;
        };
        let score = match info {
            ReceiverInfo::Labels(target) => iou_score(labels, target),
            ReceiverInfo::Probe(probe) => leep_of_task(net, task, probe)?,
        };
        scores.push(TransferScore {
            sender,
            module: module.id,
            source_task: task,
            score,
            metric: info.metric(),
        });
    }
    let modules = rank_top_k(scores, k)
        .into_iter()
        .map(|s| (serialize_module(net.module(s.module).unwrap()), s))
        .collect();
    Ok(ModuleOffer {
        sender,
        receiver,
        round,
        modules,
    })
}

/// Global argmax over all offered scores; ties go to the lower
/// `(sender, module serial)`.
pub fn receiver_select_trustmetric(offers: &[ModuleOffer]) -> Result<(AgentId, ModuleId)> {
    let all: Vec<&TransferScore> = offers.iter().flat_map(|o| o.modules.iter().map(|(_, s)| s)).collect();
    let first = all.first().ok_or(DclError::Empty("module offers"))?;
    if all.iter().any(|s| s.metric != first.metric) {
        return Err(DclError::MixedMetrics);
    }
    let best = all
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.sender.cmp(&b.sender))
                .then(a.module.serial.cmp(&b.module.serial))
        })
        .unwrap();
    Ok((best.sender, best.module))
}

/// Component dropout over the offered modules plus one fresh module.
#[allow(clippy::too_many_arguments)]
pub fn receiver_select_tryout<R: Rng + ?Sized>(
    net: &mut ModularNet,
    task: TaskId,
    offered: Vec<Module>,
    probe_epochs: usize,
    train: &InstanceBatch,
    val: &InstanceBatch,
    cfg: DropoutConfig,
    rng: &mut R,
) -> Result<DropoutOutcome> {
    if probe_epochs == 0 {
        return Err(DclError::InvalidArgument("probe_epochs must be >= 1".into()));
    }
    let mut candidates = offered;
    candidates.push(net.fresh_module(task, rng));
    component_dropout_train(net, task, candidates, probe_epochs, train, val, cfg, rng)
}
