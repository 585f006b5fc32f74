//! Compositional network: a frozen input encoder, a library of reusable
//! dense modules combined by per-task soft structure weights at every depth,
//! and per-task linear heads.

mod codec;
mod dropout;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::{
    cross_entropy, cross_entropy_grad, Block, Grads, Head, InstanceBatch, LayerKind, LayerTrace,
    Network, ParamVector,
};
use crate::TaskId;

pub use codec::{deserialize_module, serialize_module};
pub use dropout::{component_dropout_train, ComponentDropout, DropoutConfig, DropoutOutcome};

/// Structure logit given to a freshly added module in every existing task,
/// so its softmax mass is ~0 until the task is retrained.
pub const NEW_MODULE_LOGIT: f32 = -10.0;

/// Birth-task marker for basis modules created at initialization.
pub const BASIS_TASK: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModuleId {
    pub origin: u16,
    pub birth_task: u16,
    pub serial: u32,
}

/// One hidden block `relu(W h + b)` with `W` of shape `(width, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub id: ModuleId,
    /// Whether the module entered a library through component dropout.
    pub via_dropout: bool,
    pub width: usize,
    pub params: Vec<f32>,
}

impl Module {
    pub fn zeros(id: ModuleId, width: usize) -> Self {
        Self {
            id,
            via_dropout: false,
            width,
            params: vec![0.0; width * width + width],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(id: ModuleId, width: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(id, width);
        LayerKind::dense(width, width).init_xavier(&mut m.params, rng);
        m
    }

    /// Parameter count `M`.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer(&self) -> LayerKind {
        LayerKind::dense(self.width, self.width)
    }
}

/// Per-sample activations of a modular forward pass.
struct Trace {
    encoder: Vec<LayerTrace>,
    /// `h[0]` is the encoder output, `h[d + 1]` the output of depth `d`.
    h: Vec<Vec<f32>>,
    /// Module traces per depth; `None` for excluded modules.
    outs: Vec<Vec<Option<LayerTrace>>>,
    weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModularNet {
    input_dim: usize,
    width: usize,
    depth: usize,
    n_basis: usize,
    origin: u16,
    encoder_layers: Vec<LayerKind>,
    encoder: ParamVector,
    library: Vec<Module>,
    /// Row-major `(depth, library.len())` logits per task.
    structure: BTreeMap<TaskId, Vec<f32>>,
    heads: BTreeMap<TaskId, Head>,
    next_serial: u32,
}

impl ModularNet {
    /// Builds a net whose encoder and basis modules come from `rng`.
    /// `encoder_layers` must map `input_dim` to `width`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        encoder_layers: Vec<LayerKind>,
        width: usize,
        depth: usize,
        n_basis: usize,
        origin: u16,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || n_basis == 0 || width == 0 {
            return Err(DclError::InvalidArgument(
                "modular net needs depth, basis count and width > 0".into(),
            ));
        }
        let mut prev = input_dim;
        let mut slots = Vec::new();
        for (i, layer) in encoder_layers.iter().enumerate() {
            layer.validate()?;
            if layer.input_dim() != prev {
                return Err(DclError::DimensionMismatch {
                    expected: prev,
                    actual: layer.input_dim(),
                });
            }
            let (w, b) = layer.param_shapes();
            slots.push((format!("encoder{i}.weight"), w));
            slots.push((format!("encoder{i}.bias"), b));
            prev = layer.output_dim();
        }
        if prev != width {
            return Err(DclError::DimensionMismatch {
                expected: width,
                actual: prev,
            });
        }
        let mut encoder = ParamVector::zeros(slots);
        let mut offset = 0;
        for layer in &encoder_layers {
            let n = layer.param_count();
            layer.init_xavier(&mut encoder.as_mut_slice()[offset..offset + n], rng);
            offset += n;
        }
        let library = (0..n_basis)
            .map(|i| {
                let id = ModuleId {
                    origin,
                    birth_task: BASIS_TASK,
                    serial: i as u32,
                };
                Module::xavier(id, width, rng)
            })
            .collect();
        Ok(Self {
            input_dim,
            width,
            depth,
            n_basis,
            origin,
            encoder_layers,
            encoder,
            library,
            structure: BTreeMap::new(),
            heads: BTreeMap::new(),
            next_serial: n_basis as u32,
        })
    }

    /// Dense encoder `input_dim -> width`.
    pub fn dense<R: Rng + ?Sized>(
        input_dim: usize,
        width: usize,
        depth: usize,
        n_basis: usize,
        origin: u16,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            input_dim,
            vec![LayerKind::dense(input_dim, width)],
            width,
            depth,
            n_basis,
            origin,
            rng,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn origin(&self) -> u16 {
        self.origin
    }

    pub fn library(&self) -> &[Module] {
        &self.library
    }

    pub fn module(&self, id: ModuleId) -> Option<&Module> {
        self.library.iter().find(|m| m.id == id)
    }

    pub fn encoder(&self) -> &ParamVector {
        &self.encoder
    }

    pub fn encoder_layers(&self) -> &[LayerKind] {
        &self.encoder_layers
    }

    pub fn head(&self, task: TaskId) -> Option<&Head> {
        self.heads.get(&task)
    }

    pub fn structure(&self, task: TaskId) -> Option<&[f32]> {
        self.structure.get(&task).map(Vec::as_slice)
    }

    pub fn set_structure(&mut self, task: TaskId, logits: Vec<f32>) -> Result<()> {
        let expected = self.depth * self.library.len();
        if logits.len() != expected {
            return Err(DclError::DimensionMismatch {
                expected,
                actual: logits.len(),
            });
        }
        if !self.heads.contains_key(&task) {
            return Err(DclError::UnknownTask(task));
        }
        self.structure.insert(task, logits);
        Ok(())
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.heads.keys().copied()
    }

    /// Adds uniform structure weights and a Xavier head for `task`.
    pub fn add_task<R: Rng + ?Sized>(&mut self, task: TaskId, classes: usize, rng: &mut R) {
        if self.heads.contains_key(&task) {
            return;
        }
        self.heads.insert(task, Head::xavier(self.width, classes, rng));
        self.structure
            .insert(task, vec![0.0; self.depth * self.library.len()]);
    }

    pub fn set_head(&mut self, task: TaskId, head: Head) -> Result<()> {
        if head.features != self.width {
            return Err(DclError::DimensionMismatch {
                expected: self.width,
                actual: head.features,
            });
        }
        if !self.structure.contains_key(&task) {
            self.structure
                .insert(task, vec![0.0; self.depth * self.library.len()]);
        }
        self.heads.insert(task, head);
        Ok(())
    }

    /// Next locally unique id for a module born during `task`.
    pub fn next_module_id(&mut self, task: TaskId) -> ModuleId {
        let id = ModuleId {
            origin: self.origin,
            birth_task: task.0.min(u16::MAX as u32 - 1) as u16,
            serial: self.next_serial,
        };
        self.next_serial += 1;
        id
    }

    /// Freshly initialized module compatible with this library.
    pub fn fresh_module<R: Rng + ?Sized>(&mut self, task: TaskId, rng: &mut R) -> Module {
        let id = self.next_module_id(task);
        Module::xavier(id, self.width, rng)
    }

    /// Appends `module`; every existing task gets [`NEW_MODULE_LOGIT`] for it.
    pub fn add_module(&mut self, module: Module) -> Result<usize> {
        if module.width != self.width || module.params.len() != self.width * self.width + self.width {
            return Err(DclError::DimensionMismatch {
                expected: self.width,
                actual: module.width,
            });
        }
        let old = self.library.len();
        for logits in self.structure.values_mut() {
            let mut grown = Vec::with_capacity(self.depth * (old + 1));
            for d in 0..self.depth {
                grown.extend_from_slice(&logits[d * old..(d + 1) * old]);
                grown.push(NEW_MODULE_LOGIT);
            }
            *logits = grown;
        }
        self.library.push(module);
        Ok(old)
    }

    /// Undoes the last [`ModularNet::add_module`]. Basis modules are never removed.
    pub(crate) fn pop_module(&mut self) -> Option<Module> {
        if self.library.len() <= self.n_basis {
            return None;
        }
        let old = self.library.len();
        for logits in self.structure.values_mut() {
            let mut shrunk = Vec::with_capacity(self.depth * (old - 1));
            for d in 0..self.depth {
                shrunk.extend_from_slice(&logits[d * old..(d + 1) * old - 1]);
            }
            *logits = shrunk;
        }
        self.library.pop()
    }

    pub(crate) fn library_mut(&mut self) -> &mut Vec<Module> {
        &mut self.library
    }

    /// Softmax of the structure logits at `depth`, with `exclude` removed.
    pub fn structure_weights(&self, task: TaskId, depth: usize, exclude: Option<usize>) -> Result<Vec<f64>> {
        let logits = self.structure.get(&task).ok_or(DclError::UnknownTask(task))?;
        let l = self.library.len();
        let row = &logits[depth * l..(depth + 1) * l];
        let max = row
            .iter()
            .enumerate()
            .filter(|(m, _)| Some(*m) != exclude)
            .fold(f64::NEG_INFINITY, |acc, (_, v)| acc.max(*v as f64));
        let mut w: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(m, v)| {
                if Some(m) == exclude {
                    0.0
                } else {
                    (*v as f64 - max).exp()
                }
            })
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        Ok(w)
    }

    fn encode(&self, x: &[f32]) -> Vec<LayerTrace> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.encoder_layers.len());
        let mut offset = 0;
        for layer in &self.encoder_layers {
            let n = layer.param_count();
            let mut trace = LayerTrace::default();
            let input = traces.last().map(|t| t.out.as_slice()).unwrap_or(x);
            layer.forward(&self.encoder.as_slice()[offset..offset + n], input, &mut trace);
            traces.push(trace);
            offset += n;
        }
        traces
    }

    fn trace(&self, x: &[f32], task: TaskId, exclude: Option<usize>) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(DclError::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let encoder = self.encode(x);
        let h0 = encoder.last().map(|t| t.out.clone()).unwrap_or_else(|| x.to_vec());
        let mut h = vec![h0];
        let mut outs = Vec::with_capacity(self.depth);
        let mut weights = Vec::with_capacity(self.depth);
        for d in 0..self.depth {
            let w = self.structure_weights(task, d, exclude)?;
            let mut acc = vec![0.0f64; self.width];
            let mut depth_outs = Vec::with_capacity(self.library.len());
            for (m, module) in self.library.iter().enumerate() {
                if Some(m) == exclude {
                    depth_outs.push(None);
                    continue;
                }
                let mut trace = LayerTrace::default();
                module.layer().forward(&module.params, &h[d], &mut trace);
                for (a, o) in acc.iter_mut().zip(&trace.out) {
                    *a += w[m] * *o as f64;
                }
                depth_outs.push(Some(trace));
            }
            h.push(acc.into_iter().map(|v| v as f32).collect());
            outs.push(depth_outs);
            weights.push(w);
        }
        Ok(Trace {
            encoder,
            h,
            outs,
            weights,
        })
    }

    /// Forward pass with library entry `exclude` dropped from every depth.
    pub fn forward_masked(
        &self,
        x: &[f32],
        task: TaskId,
        exclude: Option<usize>,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let head = self.heads.get(&task).ok_or(DclError::UnknownTask(task))?;
        let trace = self.trace(x, task, exclude)?;
        let features = trace.h.last().unwrap().clone();
        Ok((head.logits(&features), features))
    }

    pub fn sample_grad_masked(
        &self,
        x: &[f32],
        task: TaskId,
        label: usize,
        scale: f64,
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
        exclude: Option<usize>,
    ) -> Result<f64> {
        let head = self.heads.get(&task).ok_or(DclError::UnknownTask(task))?;
        let trace = self.trace(x, task, exclude)?;
        let features = trace.h.last().unwrap();
        let logits = head.logits(features);
        let loss = cross_entropy(&logits, label);
        let dlogits = cross_entropy_grad(&logits, label, scale);
        let head_grad = if trainable(Block::Head(task)) {
            Some(grads.slot(Block::Head(task), head.params.len()))
        } else {
            None
        };
        let mut g = head.backward(features, &dlogits, head_grad);

        let l = self.library.len();
        let encoder_trainable = trainable(Block::Encoder) && !self.encoder_layers.is_empty();
        for d in (0..self.depth).rev() {
            let w = &trace.weights[d];
            let mut dots = vec![0.0f64; l];
            for (m, out) in trace.outs[d].iter().enumerate() {
                if let Some(t) = out {
                    dots[m] = g.iter().zip(&t.out).map(|(a, b)| *a as f64 * *b as f64).sum();
                }
            }
            if trainable(Block::Structure(task)) {
                let mean: f64 = w.iter().zip(&dots).map(|(a, b)| a * b).sum();
                let gs = grads.slot(Block::Structure(task), self.depth * l);
                for m in 0..l {
                    if trace.outs[d][m].is_some() {
                        gs[d * l + m] += w[m] * (dots[m] - mean);
                    }
                }
            }
            let need_input = d > 0 || encoder_trainable;
            let mut g_prev = vec![0.0f32; self.width];
            for (m, out) in trace.outs[d].iter().enumerate() {
                let Some(t) = out else { continue };
                let module = &self.library[m];
                let train_module = trainable(Block::Module(m));
                if (!train_module && !need_input) || w[m] == 0.0 {
                    continue;
                }
                let dout: Vec<f32> = g.iter().map(|v| (*v as f64 * w[m]) as f32).collect();
                let gp = if train_module {
                    Some(grads.slot(Block::Module(m), module.params.len()))
                } else {
                    None
                };
                let mut gin = Vec::new();
                module.layer().backward(
                    &module.params,
                    &trace.h[d],
                    t,
                    &dout,
                    gp,
                    if need_input { Some(&mut gin) } else { None },
                );
                for (a, b) in g_prev.iter_mut().zip(&gin) {
                    *a += *b;
                }
            }
            g = g_prev;
        }

        if encoder_trainable {
            let mut offsets = Vec::new();
            let mut off = 0;
            for layer in &self.encoder_layers {
                offsets.push(off);
                off += layer.param_count();
            }
            let genc = grads.slot(Block::Encoder, self.encoder.len());
            for li in (0..self.encoder_layers.len()).rev() {
                let layer = &self.encoder_layers[li];
                let n = layer.param_count();
                let input = if li == 0 { x } else { trace.encoder[li - 1].out.as_slice() };
                let mut gin = Vec::new();
                layer.backward(
                    &self.encoder.as_slice()[offsets[li]..offsets[li] + n],
                    input,
                    &trace.encoder[li],
                    &g,
                    Some(&mut genc[offsets[li]..offsets[li] + n]),
                    if li > 0 { Some(&mut gin) } else { None },
                );
                g = gin;
            }
        }
        Ok(loss)
    }

    /// One SGD step on a single-task batch with `exclude` dropped.
    pub fn train_step_masked(
        &mut self,
        task: TaskId,
        batch: &InstanceBatch,
        lr: f32,
        exclude: Option<usize>,
        trainable: &dyn Fn(Block) -> bool,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(DclError::Empty("training batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Grads::default();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            loss += self.sample_grad_masked(batch.row(i), task, batch.y[i], scale, &mut grads, trainable, exclude)?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(DclError::Diverged(loss));
        }
        crate::nn::apply_sgd(self, &grads, lr);
        Ok(loss)
    }

    pub fn accuracy_masked(&self, batch: &InstanceBatch, task: TaskId, exclude: Option<usize>) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for i in 0..batch.len() {
            let (logits, _) = self.forward_masked(batch.row(i), task, exclude)?;
            if crate::nn::argmax(&logits) == batch.y[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }

    fn shared_layout(&self, task: Option<TaskId>) -> Vec<(String, Vec<usize>)> {
        let mut slots: Vec<(String, Vec<usize>)> = (0..self.n_basis)
            .map(|i| (format!("module{i}"), vec![self.width * self.width + self.width]))
            .collect();
        if let Some(t) = task {
            if self.structure.contains_key(&t) {
                slots.push(("structure".into(), vec![self.depth, self.n_basis]));
            }
        }
        slots
    }

    /// Parameters aggregated by full-model sharing: the basis modules plus,
    /// when given, the basis columns of `task`'s structure.
    pub fn shared_param_count(&self, task: Option<TaskId>) -> usize {
        self.shared_layout(task).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl Network for ModularNet {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.width
    }

    fn classes(&self, task: TaskId) -> Option<usize> {
        self.heads.get(&task).map(|h| h.classes)
    }

    fn forward_one(&self, x: &[f32], task: TaskId) -> Result<(Vec<f32>, Vec<f32>)> {
        self.forward_masked(x, task, None)
    }

    fn sample_grad(
        &self,
        x: &[f32],
        task: TaskId,
        label: usize,
        scale: f64,
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
    ) -> Result<f64> {
        self.sample_grad_masked(x, task, label, scale, grads, trainable, None)
    }

    fn block(&self, block: Block) -> Option<&[f32]> {
        match block {
            Block::Encoder => Some(self.encoder.as_slice()),
            Block::Module(i) => self.library.get(i).map(|m| m.params.as_slice()),
            Block::Structure(t) => self.structure.get(&t).map(Vec::as_slice),
            Block::Head(t) => self.heads.get(&t).map(|h| h.params.as_slice()),
            Block::Trunk => None,
        }
    }

    fn block_mut(&mut self, block: Block) -> Option<&mut [f32]> {
        match block {
            Block::Encoder => Some(self.encoder.as_mut_slice()),
            Block::Module(i) => self.library.get_mut(i).map(|m| m.params.as_mut_slice()),
            Block::Structure(t) => self.structure.get_mut(&t).map(Vec::as_mut_slice),
            Block::Head(t) => self.heads.get_mut(&t).map(|h| h.params.as_mut_slice()),
            Block::Trunk => None,
        }
    }

    fn shared_params(&self, task: Option<TaskId>) -> ParamVector {
        let mut out = ParamVector::zeros(self.shared_layout(task));
        let m = self.width * self.width + self.width;
        let data = out.as_mut_slice();
        for i in 0..self.n_basis {
            data[i * m..(i + 1) * m].copy_from_slice(&self.library[i].params);
        }
        if let Some(logits) = task.and_then(|t| self.structure.get(&t)) {
            let l = self.library.len();
            let base = self.n_basis * m;
            for d in 0..self.depth {
                for b in 0..self.n_basis {
                    data[base + d * self.n_basis + b] = logits[d * l + b];
                }
            }
        }
        out
    }

    fn set_shared_params(&mut self, task: Option<TaskId>, params: &ParamVector) -> Result<()> {
        let expected = self.shared_param_count(task);
        if params.len() != expected {
            return Err(DclError::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        let m = self.width * self.width + self.width;
        let data = params.as_slice();
        for i in 0..self.n_basis {
            self.library[i].params.copy_from_slice(&data[i * m..(i + 1) * m]);
        }
        let l = self.library.len();
        let (depth, n_basis) = (self.depth, self.n_basis);
        if let Some(logits) = task.and_then(|t| self.structure.get_mut(&t)) {
            let base = n_basis * m;
            for d in 0..depth {
                for b in 0..n_basis {
                    logits[d * l + b] = data[base + d * n_basis + b];
                }
            }
        }
        Ok(())
    }

    fn shared_grad(&self, task: Option<TaskId>, grads: &Grads) -> Vec<f64> {
        let m = self.width * self.width + self.width;
        let mut out = vec![0.0f64; self.shared_param_count(task)];
        for i in 0..self.n_basis {
            if let Some(g) = grads.get(Block::Module(i)) {
                out[i * m..(i + 1) * m].copy_from_slice(g);
            }
        }
        if let Some(t) = task.filter(|t| self.structure.contains_key(t)) {
            if let Some(g) = grads.get(Block::Structure(t)) {
                let l = self.library.len();
                let base = self.n_basis * m;
                for d in 0..self.depth {
                    for b in 0..self.n_basis {
                        out[base + d * self.n_basis + b] = g[d * l + b];
                    }
                }
            }
        }
        out
    }

    fn add_shared_grad(
        &self,
        task: Option<TaskId>,
        grad: &[f64],
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
    ) {
        let m = self.width * self.width + self.width;
        for i in 0..self.n_basis {
            if trainable(Block::Module(i)) {
                for (g, d) in grads.slot(Block::Module(i), m).iter_mut().zip(&grad[i * m..(i + 1) * m]) {
                    *g += d;
                }
            }
        }
        if let Some(t) = task.filter(|t| self.structure.contains_key(t)) {
            if trainable(Block::Structure(t)) {
                let l = self.library.len();
                let base = self.n_basis * m;
                let gs = grads.slot(Block::Structure(t), self.depth * l);
                for d in 0..self.depth {
                    for b in 0..self.n_basis {
                        gs[d * l + b] += grad[base + d * self.n_basis + b];
                    }
                }
            }
        }
    }
}
