use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{dense_affine, dense_affine_backward, LayerKind, LayerTrace};
use super::{cross_entropy, cross_entropy_grad, Block, Grads, Network, ParamVector};
use crate::error::{DclError, Result};
use crate::TaskId;

/// Linear output head, `W` row-major `(classes, features)` followed by bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub classes: usize,
    pub features: usize,
    pub params: Vec<f32>,
}

impl Head {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            classes,
            features,
            params: vec![0.0; classes * features + classes],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(features: usize, classes: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(features, classes);
        LayerKind::dense(features, classes).init_xavier(&mut head.params, rng);
        head
    }

    pub fn logits(&self, features: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.classes];
        dense_affine(&self.params, self.features, self.classes, features, &mut out);
        out
    }

    /// Returns the gradient w.r.t. the head input.
    pub(crate) fn backward(
        &self,
        features: &[f32],
        dlogits: &[f32],
        grad_params: Option<&mut [f64]>,
    ) -> Vec<f32> {
        let mut gin = Vec::new();
        dense_affine_backward(
            &self.params,
            self.features,
            self.classes,
            features,
            dlogits,
            grad_params,
            Some(&mut gin),
        );
        gin
    }
}

/// Standard feed-forward net: a shared trunk of ReLU layers and one linear
/// head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MonolithicNet {
    input_dim: usize,
    layers: Vec<LayerKind>,
    trunk: ParamVector,
    heads: BTreeMap<TaskId, Head>,
}

impl MonolithicNet {
    /// Zero-initialized trunk.
    pub fn zeros(input_dim: usize, layers: Vec<LayerKind>) -> Result<Self> {
        let mut prev = input_dim;
        let mut slots = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if layer.input_dim() != prev {
                return Err(DclError::DimensionMismatch {
                    expected: prev,
                    actual: layer.input_dim(),
                });
            }
            let (w, b) = layer.param_shapes();
            slots.push((format!("layer{i}.weight"), w));
            slots.push((format!("layer{i}.bias"), b));
            prev = layer.output_dim();
        }
        Ok(Self {
            input_dim,
            layers,
            trunk: ParamVector::zeros(slots),
            heads: BTreeMap::new(),
        })
    }

    /// Xavier-uniform trunk.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, layers: Vec<LayerKind>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_dim, layers)?;
        let mut offset = 0;
        for layer in &net.layers {
            let n = layer.param_count();
            layer.init_xavier(&mut net.trunk.as_mut_slice()[offset..offset + n], rng);
            offset += n;
        }
        Ok(net)
    }

    /// Dense ReLU trunk with the given hidden widths.
    pub fn mlp<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerKind::dense(prev, h));
            prev = h;
        }
        Self::new(input_dim, layers, rng)
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    pub fn trunk(&self) -> &ParamVector {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut ParamVector {
        &mut self.trunk
    }

    pub fn head(&self, task: TaskId) -> Option<&Head> {
        self.heads.get(&task)
    }

    pub fn heads(&self) -> &BTreeMap<TaskId, Head> {
        &self.heads
    }

    /// Adds a Xavier-initialized head; existing heads are kept.
    pub fn add_task<R: Rng + ?Sized>(&mut self, task: TaskId, classes: usize, rng: &mut R) {
        let features = self.feature_dim();
        self.heads
            .entry(task)
            .or_insert_with(|| Head::xavier(features, classes, rng));
    }

    pub fn set_head(&mut self, task: TaskId, head: Head) -> Result<()> {
        if head.features != self.feature_dim() {
            return Err(DclError::DimensionMismatch {
                expected: self.feature_dim(),
                actual: head.features,
            });
        }
        self.heads.insert(task, head);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.len() + self.heads.values().map(|h| h.params.len()).sum::<usize>()
    }

    fn trunk_forward(&self, x: &[f32]) -> Vec<LayerTrace> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            let params = &self.trunk.as_slice()[offset..offset + n];
            let mut trace = LayerTrace::default();
            let input = traces.last().map(|t| t.out.as_slice()).unwrap_or(x);
            layer.forward(params, input, &mut trace);
            traces.push(trace);
            offset += n;
        }
        traces
    }
}

impl Network for MonolithicNet {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(self.input_dim)
    }

    fn classes(&self, task: TaskId) -> Option<usize> {
        self.heads.get(&task).map(|h| h.classes)
    }

    fn forward_one(&self, x: &[f32], task: TaskId) -> Result<(Vec<f32>, Vec<f32>)> {
        let head = self.heads.get(&task).ok_or(DclError::UnknownTask(task))?;
        let traces = self.trunk_forward(x);
        let features = traces.last().map(|t| t.out.clone()).unwrap_or_else(|| x.to_vec());
        Ok((head.logits(&features), features))
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
        let head = self.heads.get(&task).ok_or(DclError::UnknownTask(task))?;
        let traces = self.trunk_forward(x);
        let features = traces.last().map(|t| t.out.as_slice()).unwrap_or(x);
        let logits = head.logits(features);
        let loss = cross_entropy(&logits, label);
        let dlogits = cross_entropy_grad(&logits, label, scale);

        let head_grad = if trainable(Block::Head(task)) {
            Some(grads.slot(Block::Head(task), head.params.len()))
        } else {
            None
        };
        let mut g = head.backward(features, &dlogits, head_grad);

        if trainable(Block::Trunk) && !self.layers.is_empty() {
            let trunk_len = self.trunk.len();
            let mut offsets = Vec::with_capacity(self.layers.len());
            let mut off = 0;
            for layer in &self.layers {
                offsets.push(off);
                off += layer.param_count();
            }
            let gtrunk = grads.slot(Block::Trunk, trunk_len);
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let n = layer.param_count();
                let params = &self.trunk.as_slice()[offsets[li]..offsets[li] + n];
                let input = if li == 0 { x } else { traces[li - 1].out.as_slice() };
                let mut gin = Vec::new();
                layer.backward(
                    params,
                    input,
                    &traces[li],
                    &g,
                    Some(&mut gtrunk[offsets[li]..offsets[li] + n]),
                    if li > 0 { Some(&mut gin) } else { None },
                );
                g = gin;
            }
        }
        Ok(loss)
    }

    fn block(&self, block: Block) -> Option<&[f32]> {
        match block {
            Block::Trunk => Some(self.trunk.as_slice()),
            Block::Head(t) => self.heads.get(&t).map(|h| h.params.as_slice()),
            _ => None,
        }
    }

    fn block_mut(&mut self, block: Block) -> Option<&mut [f32]> {
        match block {
            Block::Trunk => Some(self.trunk.as_mut_slice()),
            Block::Head(t) => self.heads.get_mut(&t).map(|h| h.params.as_mut_slice()),
            _ => None,
        }
    }

    fn shared_params(&self, _task: Option<TaskId>) -> ParamVector {
        self.trunk.clone()
    }

    fn set_shared_params(&mut self, _task: Option<TaskId>, params: &ParamVector) -> Result<()> {
        if params.len() != self.trunk.len() {
            return Err(DclError::DimensionMismatch {
                expected: self.trunk.len(),
                actual: params.len(),
            });
        }
        self.trunk.as_mut_slice().copy_from_slice(params.as_slice());
        Ok(())
    }

    fn shared_grad(&self, _task: Option<TaskId>, grads: &Grads) -> Vec<f64> {
        grads
            .get(Block::Trunk)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.trunk.len()])
    }

    fn add_shared_grad(
        &self,
        _task: Option<TaskId>,
        grad: &[f64],
        grads: &mut Grads,
        trainable: &dyn Fn(Block) -> bool,
    ) {
        if !trainable(Block::Trunk) || self.trunk.is_empty() {
            return;
        }
        for (g, d) in grads.slot(Block::Trunk, self.trunk.len()).iter_mut().zip(grad) {
            *g += d;
        }
    }
}
