//! IDX binary container: big-endian magic, big-endian u32 extents, raw u8
//! payload. Pixels map linearly from [0,255] onto [-1,1]; label files become
//! one-hot binary attribute vectors.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AttributedDataset, DataError, Result, Split};
use crate::tensor::Tensor;

/// 3-D unsigned-byte tensor (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// 1-D unsigned-byte vector (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

pub fn pixel_to_unit(byte: u8) -> f64 {
    2.0 * byte as f64 / 255.0 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let expected = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::SizeMismatch(format!(
            "{} payload bytes for {} declared elements",
            payload.len(),
            expected
        )));
    }
    Ok((n, h, w, payload.iter().map(|&b| pixel_to_unit(b)).collect()))
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(DataError::Truncated {
            expected: n,
            found: payload.len(),
        });
    }
    if payload.len() > n {
        return Err(DataError::SizeMismatch(format!(
            "{} payload bytes for {} declared labels",
            payload.len(),
            n
        )));
    }
    Ok(payload.to_vec())
}

/// Load an IDX image file (single-channel) and, optionally, a label file
/// whose classes become one-hot binary attributes named `class_<k>`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<AttributedDataset> {
    let bytes = fs::read(images_path)?;
    let (n, h, w, pixels) = parse_images(&bytes)?;
    let images = Tensor::from_vec(&[n, 1, h, w], pixels)
        .map_err(|e| DataError::Invalid(e.to_string()))?;

    let (attrs, names) = match labels_path {
        Some(path) => {
            let labels = parse_labels(&fs::read(path)?)?;
            if labels.len() != n {
                return Err(DataError::SizeMismatch(format!(
                    "{} labels for {} images",
                    labels.len(),
                    n
                )));
            }
            let classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
            let mut onehot = vec![0.0; n * classes];
            for (i, &l) in labels.iter().enumerate() {
                onehot[i * classes + l as usize] = 1.0;
            }
            (
                Tensor::from_vec(&[n, classes], onehot).unwrap(),
                (0..classes).map(|k| format!("class_{k}")).collect(),
            )
        }
        None => (Tensor::zeros(&[n, 0]), Vec::new()),
    };
    AttributedDataset::new(images, attrs, names, Split::Train)
}

/// Write a [N,1,H,W] tensor in [-1,1] as an IDX u8 image file.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    if images.rank() != 4 || images.shape()[1] != 1 {
        return Err(DataError::Invalid(format!(
            "expected [N,1,H,W] images, got {:?}",
            images.shape()
        )));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let mut out = fs::File::create(path)?;
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    out.write_all(&(n as u32).to_be_bytes())?;
    out.write_all(&(h as u32).to_be_bytes())?;
    out.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images.data().iter().map(|&v| unit_to_pixel(v)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Write class labels (row-wise argmax of one-hot attributes) as an IDX u8
/// label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    Ok(())
}
