use super::{Grads, InstanceBatch, LayerSlot, Network};
use crate::error::{DclError, Result};
use crate::TaskId;

/// Smallest temperature used when normalizing a layer.
pub const MIN_TEMPERATURE: f64 = 1e-8;

/// Diagonal of the empirical Fisher information, aligned with a network's
/// shared parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: Vec<f32>,
    layout: Vec<LayerSlot>,
    normalized: bool,
    /// Per-slot softmax temperature (normalized form only).
    temperatures: Vec<f32>,
    /// Per-slot maximum of the raw diagonal.
    layer_max: Vec<f32>,
}

impl FisherDiag {
    pub fn from_raw(values: Vec<f32>, layout: Vec<LayerSlot>) -> Result<Self> {
        let covered: usize = layout.iter().map(LayerSlot::len).sum();
        if covered != values.len() {
            return Err(DclError::DimensionMismatch {
                expected: covered,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(DclError::OutOfRange("Fisher entries must be >= 0".into()));
        }
        let layer_max = layout
            .iter()
            .map(|s| values[s.range()].iter().fold(0.0f32, |m, v| m.max(*v)))
            .collect();
        Ok(Self {
            values,
            layout,
            normalized: false,
            temperatures: Vec::new(),
            layer_max,
        })
    }

    /// Diagonal with every entry equal to `value` over a single slot.
    pub fn constant(len: usize, value: f32) -> Self {
        let layout = vec![LayerSlot {
            name: "flat".into(),
            offset: 0,
            shape: vec![len],
        }];
        Self::from_raw(vec![value; len], layout).expect("constant Fisher is well formed")
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn temperatures(&self) -> &[f32] {
        &self.temperatures
    }

    pub fn layer_max(&self) -> &[f32] {
        &self.layer_max
    }
}

/// Mean over samples of the squared gradient of `log p(y|x)` w.r.t. the shared
/// parameters of `net`, using `task`'s head.
pub fn estimate_fisher_diag<N: Network + ?Sized>(
    net: &N,
    data: &InstanceBatch,
    task: TaskId,
) -> Result<FisherDiag> {
    estimate_fisher_multi(net, &[(task, data)], Some(task))
}

/// Fisher diagonal over several tasks' data; `shared_task` selects the shared
/// view (relevant for modular nets).
pub fn estimate_fisher_multi<N: Network + ?Sized>(
    net: &N,
    groups: &[(TaskId, &InstanceBatch)],
    shared_task: Option<TaskId>,
) -> Result<FisherDiag> {
    let n: usize = groups.iter().map(|(_, b)| b.len()).sum();
    if n == 0 {
        return Err(DclError::Empty("Fisher estimation data"));
    }
    let shared = net.shared_params(shared_task);
    let mut acc = vec![0.0f64; shared.len()];
    for (task, batch) in groups {
        if net.classes(*task).is_none() {
            return Err(DclError::UnknownTask(*task));
        }
        for i in 0..batch.len() {
            let mut grads = Grads::default();
            net.sample_grad(batch.row(i), *task, batch.y[i], 1.0, &mut grads, &|_| true)?;
            for (a, g) in acc.iter_mut().zip(net.shared_grad(shared_task, &grads)) {
                *a += g * g;
            }
        }
    }
    let values = acc.into_iter().map(|a| (a / n as f64) as f32).collect();
    FisherDiag::from_raw(values, shared.layout().to_vec())
}

/// `softmax(entries / temperature)` divided by its maximum, i.e.
/// `exp((e - max) / temperature)`.
pub fn normalize_layer(entries: &[f32], temperature: f64) -> Vec<f32> {
    let max = entries.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    entries
        .iter()
        .map(|e| ((*e as f64 - max) / temperature).exp() as f32)
        .collect()
}

/// Per-slot softmax with temperature equal to the slot mean (floored at
/// [`MIN_TEMPERATURE`]), rescaled by the slot maximum so values lie in
/// `[0, 1]` and the largest entry maps to 1. An all-zero slot maps to all ones.
pub fn normalize_fisher(fd: &FisherDiag) -> FisherDiag {
    let mut values = fd.values.clone();
    let mut temperatures = Vec::with_capacity(fd.layout.len());
    for slot in &fd.layout {
        let entries = &fd.values[slot.range()];
        if entries.is_empty() {
            temperatures.push(MIN_TEMPERATURE as f32);
            continue;
        }
        let mean = entries.iter().map(|v| *v as f64).sum::<f64>() / entries.len() as f64;
        let temperature = mean.max(MIN_TEMPERATURE);
        values[slot.range()].copy_from_slice(&normalize_layer(entries, temperature));
        temperatures.push(temperature as f32);
    }
    FisherDiag {
        values,
        layout: fd.layout.clone(),
        normalized: true,
        temperatures,
        layer_max: fd.layer_max.clone(),
    }
}
