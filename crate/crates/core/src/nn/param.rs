use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

/// Named region of a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `f32` parameters with a layer index map.
///
/// The layout slots are contiguous, disjoint and cover the whole array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f32>,
    layout: Vec<LayerSlot>,
}

impl ParamVector {
    /// Zero-filled vector with slots laid out in the given order.
    pub fn zeros<S: Into<String>>(slots: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (name, shape) in slots {
            let slot = LayerSlot {
                name: name.into(),
                offset,
                shape,
            };
            offset += slot.len();
            layout.push(slot);
        }
        Self {
            data: vec![0.0; offset],
            layout,
        }
    }

    /// A single unnamed slot covering `data`.
    pub fn flat(data: Vec<f32>) -> Self {
        let layout = vec![LayerSlot {
            name: "flat".into(),
            offset: 0,
            shape: vec![data.len()],
        }];
        Self { data, layout }
    }

    pub fn from_parts(data: Vec<f32>, layout: Vec<LayerSlot>) -> Result<Self> {
        let mut expected = 0;
        for slot in &layout {
            if slot.offset != expected {
                return Err(DclError::InvalidArgument(format!(
                    "slot {} starts at {} but previous slots end at {}",
                    slot.name, slot.offset, expected
                )));
            }
            expected += slot.len();
        }
        if expected != data.len() {
            return Err(DclError::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { data, layout })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn slot(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.layout.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[range])
    }

    /// Same layout, different values.
    pub fn with_values(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(DclError::DimensionMismatch {
                expected: self.data.len(),
                actual: data.len(),
            });
        }
        Ok(Self {
            data,
            layout: self.layout.clone(),
        })
    }

    /// Payload cost in floats.
    pub fn floats(&self) -> u64 {
        self.data.len() as u64
    }

    /// Length-prefixed (u64) little-endian float array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`ParamVector::to_bytes`] given the expected layout.
    pub fn from_bytes(bytes: &[u8], layout: Vec<LayerSlot>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(DclError::Truncated("parameter vector header".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * n {
            return Err(DclError::Truncated(format!(
                "expected {} float bytes, found {}",
                4 * n,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(data, layout)
    }
}
