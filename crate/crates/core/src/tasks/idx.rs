//! IDX (MNIST-style) image and label files.

use std::fs;
use std::path::Path;

use crate::error::{DclError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]`, row-major `rows x cols` each.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl IdxData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DclError::Truncated(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DclError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<IdxData> {
    check_magic(images, IMAGE_MAGIC, "image file")?;
    check_magic(labels, LABEL_MAGIC, "label file")?;
    let n_images = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    let n_labels = be_u32(labels, 4, "label file")? as usize;
    if n_images != n_labels {
        return Err(DclError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = images
        .get(16..16 + n_images * rows * cols)
        .ok_or_else(|| DclError::Truncated(format!("image file shorter than {n_images} images")))?;
    let label_bytes = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| DclError::Truncated(format!("label file shorter than {n_labels} labels")))?;
    Ok(IdxData {
        rows,
        cols,
        images: pixels.iter().map(|p| *p as f32 / 255.0).collect(),
        labels: label_bytes.to_vec(),
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxData> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Writes raw `u8` pixels and labels in IDX format.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    label_values: &[u8],
) -> Result<()> {
    if pixels.len() != label_values.len() * rows * cols {
        return Err(DclError::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: label_values.len(),
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, label_values.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + label_values.len());
    for v in [LABEL_MAGIC, label_values.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(label_values);
    fs::write(images, img)?;
    fs::write(labels, lbl)?;
    Ok(())
}
