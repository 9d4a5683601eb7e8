//! IDX-format loader (the MNIST container): big-endian header, u8 payload.
//! Pixels are scaled to [0,1] by division by 255.

use crate::checkpoint::read_file;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "IDX file".into(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| parse_err(format!("truncated header at offset {offset}")))
}

/// Load an images/labels IDX pair into a dataset. The class count is the
/// largest label plus one (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let magic = be_u32(&image_bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(format!(
            "bad images magic {magic:#010x} (expected {IMAGES_MAGIC:#010x})"
        )));
    }
    let n_images = be_u32(&image_bytes, 4)? as usize;
    let rows = be_u32(&image_bytes, 8)? as usize;
    let cols = be_u32(&image_bytes, 12)? as usize;
    let per = rows * cols;
    let expected = 16 + n_images * per;
    if image_bytes.len() < expected {
        return Err(parse_err(format!(
            "images file truncated: {} bytes, expected {expected}",
            image_bytes.len()
        )));
    }

    let magic = be_u32(&label_bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(format!(
            "bad labels magic {magic:#010x} (expected {LABELS_MAGIC:#010x})"
        )));
    }
    let n_labels = be_u32(&label_bytes, 4)? as usize;
    if n_labels != n_images {
        return Err(parse_err(format!(
            "count mismatch: {n_images} images but {n_labels} labels"
        )));
    }
    if label_bytes.len() < 8 + n_labels {
        return Err(parse_err(format!(
            "labels file truncated: {} bytes, expected {}",
            label_bytes.len(),
            8 + n_labels
        )));
    }

    let mut inputs = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let start = 16 + i * per;
        let data: Vec<f32> = image_bytes[start..start + per]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        inputs.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    let labels: Vec<usize> = label_bytes[8..8 + n_labels]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(inputs, labels, classes)
}
