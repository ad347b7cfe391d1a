//! Big-endian IDX file parsing and serialization (the MNIST-family format).

use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &str, need: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected: need,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an images file: magic, `[n, rows, cols]`, then unsigned bytes.
/// Pixels come back normalized to `[0, 1]`.
pub(super) fn parse_images(bytes: &[u8], path: &str) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_u32(bytes, 0, path, 16)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: path.to_string(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, path, 16)? as usize;
    let rows = read_u32(bytes, 8, path, 16)? as usize;
    let cols = read_u32(bytes, 12, path, 16)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((data, n, rows, cols))
}

/// Parse a labels file: magic, `[n]`, then one byte per label.
pub(super) fn parse_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path, 8)?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: path.to_string(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, path, 8)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

pub(super) fn load_idx_bytes(
    images: &[u8],
    labels: &[u8],
    images_path: &str,
    labels_path: &str,
    name: &str,
) -> Result<Dataset> {
    let (pixels, n, rows, cols) = parse_images(images, images_path)?;
    let labels = parse_labels(labels, labels_path)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(1);
    let inputs = crate::tensor::Tensor::new(vec![n, rows, cols], pixels)?;
    Dataset::new(name, inputs, labels, num_classes)
}

/// Load an images/labels IDX pair from disk.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    load_idx_bytes(
        &images,
        &labels,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
        &name,
    )
}

/// Serialize a `[n, rows, cols]` dataset with pixels in `[0, 1]` back to IDX
/// bytes. Values are scaled by 255 and rounded, the inverse of loading.
pub(super) fn to_idx_bytes(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = dataset.inputs().shape();
    let [n, rows, cols] = shape else {
        return Err(Error::InvalidArgument(format!(
            "IDX serialization needs [n, rows, cols] data, got {shape:?}"
        )));
    };
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(*n as u32).to_be_bytes());
    images.extend_from_slice(&(*rows as u32).to_be_bytes());
    images.extend_from_slice(&(*cols as u32).to_be_bytes());
    for &v in dataset.inputs().data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "pixel {v} outside [0, 1], not IDX-representable"
            )));
        }
        images.push((v * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(*n as u32).to_be_bytes());
    for &l in dataset.labels() {
        if l > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "label {l} does not fit in one byte"
            )));
        }
        labels.push(l as u8);
    }
    Ok((images, labels))
}
