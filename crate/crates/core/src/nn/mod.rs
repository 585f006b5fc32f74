//! Minimal dense numerical engine: trunk layers, per-task heads, softmax
//! cross-entropy, SGD with optional penalty terms, and Fisher diagonals.
//!
//! Parameters are `f32`; every reduction accumulates in `f64`.

mod fisher;
mod layer;
mod mono;
mod param;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::TaskId;

pub use fisher::{estimate_fisher_diag, estimate_fisher_multi, normalize_fisher, normalize_layer, FisherDiag};
pub use layer::{dense_affine, dense_affine_backward, LayerKind, LayerTrace};
pub use mono::{Head, MonolithicNet};
pub use param::{LayerSlot, ParamVector};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Instances of one task: inputs plus labels local to that task's label set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceBatch {
    pub dim: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

impl InstanceBatch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f32], y: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    /// Batch made of the given row indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &InstanceBatch) {
        debug_assert_eq!(self.dim, other.dim);
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
    }
}

/// Identifies one parameter block of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Trunk,
    Encoder,
    Module(usize),
    Structure(TaskId),
    Head(TaskId),
}

/// Gradient buffers keyed by block, accumulated in `f64`.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<Block, Vec<f64>>,
}

impl Grads {
    pub fn slot(&mut self, block: Block, len: usize) -> &mut [f64] {
        let v = self.map.entry(block).or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(v.len(), len);
        v
    }

    pub fn get(&self, block: Block) -> Option<&[f64]> {
        self.map.get(&block).map(Vec::as_slice)
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            for g in v {
                *g *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Block, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A network with per-task heads that can be trained by [`train_step`].
pub trait Network {
    fn input_dim(&self) -> usize;

    /// Width of the penultimate (pre-head) representation.
    fn feature_dim(&self) -> usize;

    /// Number of output classes of a task head.
    fn classes(&self, task: TaskId) -> Option<usize>;

    /// Logits and penultimate features of a single input.
    fn forward_one(&self, x: &[f32], task: TaskId) -> Result<(Vec<f32>, Vec<f32>)>;

    /// Accumulates `scale * d CE(x, label) / d params` into `grads` for every
    /// block where `trainable` holds. Returns the cross-entropy.
    fn sample_grad(
        &self,
        x: &[f32],
        task: TaskId,
        label: usize,
        scale: f64,
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
    ) -> Result<f64>;

    fn block(&self, block: Block) -> Option<&[f32]>;

    fn block_mut(&mut self, block: Block) -> Option<&mut [f32]>;

    /// The parameters exchanged by full-model sharing.
    fn shared_params(&self, task: Option<TaskId>) -> ParamVector;

    fn set_shared_params(&mut self, task: Option<TaskId>, params: &ParamVector) -> Result<()>;

    /// Gradient restricted to the shared parameters, in shared order.
    fn shared_grad(&self, task: Option<TaskId>, grads: &Grads) -> Vec<f64>;

    /// Scatters a gradient in shared order back into block buffers.
    fn add_shared_grad(
        &self,
        task: Option<TaskId>,
        grad: &[f64],
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
    );
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|v| (*v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / sum) as f32).collect()
}

/// Numerically stable `-log softmax(logits)[label]` in `f64`.
pub fn cross_entropy(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    let lse = logits
        .iter()
        .map(|v| (*v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - logits[label] as f64
}

/// `softmax(logits) - onehot(label)`, times `scale`.
pub fn cross_entropy_grad(logits: &[f32], label: usize, scale: f64) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|v| (*v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter()
        .enumerate()
        .map(|(i, e)| {
            let p = e / sum;
            let t = if i == label { 1.0 } else { 0.0 };
            ((p - t) * scale) as f32
        })
        .collect()
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Extra loss on the shared parameters used by proximal federated variants.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyTerm {
    /// `(mu/2) ||theta - anchor||^2`
    Proximal { anchor: ParamVector, mu: f32 },
    /// `mu * sum_j sum_p F_j[p] (theta[p] - snapshot_j[p])^2`
    Curvature {
        snapshots: Vec<(ParamVector, FisherDiag)>,
        mu: f32,
    },
}

impl PenaltyTerm {
    pub fn value(&self, theta: &[f32]) -> f64 {
        match self {
            PenaltyTerm::Proximal { anchor, mu } => {
                let sq: f64 = theta
                    .iter()
                    .zip(anchor.as_slice())
                    .map(|(t, a)| {
                        let d = *t as f64 - *a as f64;
                        d * d
                    })
                    .sum();
                0.5 * *mu as f64 * sq
            }
            PenaltyTerm::Curvature { snapshots, mu } => {
                let mut acc = 0.0;
                for (snap, fisher) in snapshots {
                    for ((t, s), f) in theta.iter().zip(snap.as_slice()).zip(fisher.values()) {
                        let d = *t as f64 - *s as f64;
                        acc += *f as f64 * d * d;
                    }
                }
                *mu as f64 * acc
            }
        }
    }

    pub fn gradient(&self, theta: &[f32]) -> Vec<f64> {
        match self {
            PenaltyTerm::Proximal { anchor, mu } => theta
                .iter()
                .zip(anchor.as_slice())
                .map(|(t, a)| *mu as f64 * (*t as f64 - *a as f64))
                .collect(),
            PenaltyTerm::Curvature { snapshots, mu } => {
                let mut g = vec![0.0f64; theta.len()];
                for (snap, fisher) in snapshots {
                    for (((gp, t), s), f) in g
                        .iter_mut()
                        .zip(theta)
                        .zip(snap.as_slice())
                        .zip(fisher.values())
                    {
                        *gp += 2.0 * *mu as f64 * *f as f64 * (*t as f64 - *s as f64);
                    }
                }
                g
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PenaltyTerm::Proximal { anchor, .. } => anchor.len(),
            PenaltyTerm::Curvature { snapshots, .. } => {
                snapshots.first().map(|(s, _)| s.len()).unwrap_or(0)
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_batch<N: Network + ?Sized>(net: &N, batch: &InstanceBatch, task: TaskId) -> Result<usize> {
    let classes = net.classes(task).ok_or(DclError::UnknownTask(task))?;
    if batch.dim != net.input_dim() {
        return Err(DclError::DimensionMismatch {
            expected: net.input_dim(),
            actual: batch.dim,
        });
    }
    Ok(classes)
}

/// Logits `(batch, classes(task))` and penultimate features.
pub fn forward<N: Network + ?Sized>(
    net: &N,
    batch: &InstanceBatch,
    task: TaskId,
) -> Result<(Matrix, Matrix)> {
    let classes = check_batch(net, batch, task)?;
    let mut logits = Matrix::zeros(batch.len(), classes);
    let mut features = Matrix::zeros(batch.len(), net.feature_dim());
    for i in 0..batch.len() {
        let (l, f) = net.forward_one(batch.row(i), task)?;
        logits.data[i * classes..(i + 1) * classes].copy_from_slice(&l);
        let fd = features.cols;
        features.data[i * fd..(i + 1) * fd].copy_from_slice(&f);
    }
    Ok((logits, features))
}

/// Mean cross-entropy (plus penalty) and its gradient over several
/// task-homogeneous groups. `shared_task` selects which task's shared view
/// the penalty acts on.
pub fn loss_and_grads<N: Network + ?Sized>(
    net: &N,
    groups: &[(TaskId, &InstanceBatch)],
    penalty: Option<&PenaltyTerm>,
    shared_task: Option<TaskId>,
    trainable: &dyn Fn(Block) -> bool,
) -> Result<(f64, Grads)> {
    let n: usize = groups.iter().map(|(_, b)| b.len()).sum();
    if n == 0 {
        return Err(DclError::Empty("training batch"));
    }
    for (task, batch) in groups {
        check_batch(net, batch, *task)?;
    }
    let scale = 1.0 / n as f64;
    let mut grads = Grads::default();
    let mut loss = 0.0;
    for (task, batch) in groups {
        for i in 0..batch.len() {
            loss += net.sample_grad(batch.row(i), *task, batch.y[i], scale, &mut grads, trainable)?;
        }
    }
    loss *= scale;
    if let Some(term) = penalty {
        let theta = net.shared_params(shared_task);
        if theta.len() != term.len() {
            return Err(DclError::DimensionMismatch {
                expected: theta.len(),
                actual: term.len(),
            });
        }
        loss += term.value(theta.as_slice());
        let g = term.gradient(theta.as_slice());
        net.add_shared_grad(shared_task, &g, &mut grads, trainable);
    }
    Ok((loss, grads))
}

/// `params -= lr * grads` block by block.
pub fn apply_sgd<N: Network + ?Sized>(net: &mut N, grads: &Grads, lr: f32) {
    for (block, g) in grads.iter() {
        if let Some(p) = net.block_mut(*block) {
            for (pi, gi) in p.iter_mut().zip(g) {
                *pi = (*pi as f64 - lr as f64 * gi) as f32;
            }
        }
    }
}

/// One SGD step on the mixed batch; returns the pre-step loss. A non-finite
/// loss aborts the step and leaves parameters untouched.
pub fn train_step<N: Network + ?Sized>(
    net: &mut N,
    groups: &[(TaskId, &InstanceBatch)],
    lr: f32,
    penalty: Option<&PenaltyTerm>,
    shared_task: Option<TaskId>,
    trainable: &dyn Fn(Block) -> bool,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(&*net, groups, penalty, shared_task, trainable)?;
    if !loss.is_finite() {
        return Err(DclError::Diverged(loss));
    }
    apply_sgd(net, &grads, lr);
    Ok(loss)
}

/// Single-task SGD step on cross-entropy plus an optional penalty, training
/// every block.
pub fn backward_sgd_step<N: Network + ?Sized>(
    net: &mut N,
    batch: &InstanceBatch,
    task: TaskId,
    lr: f32,
    extra_loss: Option<&PenaltyTerm>,
) -> Result<f64> {
    if !(lr >= 0.0) {
        return Err(DclError::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    train_step(net, &[(task, batch)], lr, extra_loss, Some(task), &|_| true)
}

/// Fraction of correctly classified instances.
pub fn accuracy<N: Network + ?Sized>(net: &N, batch: &InstanceBatch, task: TaskId) -> Result<f64> {
    check_batch(net, batch, task)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let (logits, _) = net.forward_one(batch.row(i), task)?;
        if argmax(&logits) == batch.y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Per-instance cross-entropy.
pub fn per_instance_loss<N: Network + ?Sized>(
    net: &N,
    batch: &InstanceBatch,
    task: TaskId,
) -> Result<Vec<f64>> {
    check_batch(net, batch, task)?;
    (0..batch.len())
        .map(|i| {
            let (logits, _) = net.forward_one(batch.row(i), task)?;
            Ok(cross_entropy(&logits, batch.y[i]))
        })
        .collect()
}
