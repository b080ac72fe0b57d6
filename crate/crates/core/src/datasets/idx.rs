//! IDX container parsing (the classic MNIST on-disk format).
//!
//! Big-endian throughout: images carry magic 0x00000803 (2051) followed by
//! count/rows/cols, labels carry magic 0x00000801 (2049) followed by count.

use ndarray::Array2;
use std::fs;
use std::path::Path;

use super::RawDigit;
use crate::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Length {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Read an images file together with its companion labels file.
pub fn read_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Vec<RawDigit>> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = be_u32(&img_bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images file {} has magic {magic}, expected {IMAGES_MAGIC}",
            images_path.display()
        )));
    }
    let count = be_u32(&img_bytes, 4)? as usize;
    let rows = be_u32(&img_bytes, 8)? as usize;
    let cols = be_u32(&img_bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(Error::Length {
            expected,
            found: img_bytes.len(),
        });
    }

    let lbl_magic = be_u32(&lbl_bytes, 0)?;
    if lbl_magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels file {} has magic {lbl_magic}, expected {LABELS_MAGIC}",
            labels_path.display()
        )));
    }
    let lbl_count = be_u32(&lbl_bytes, 4)? as usize;
    if lbl_count != count {
        return Err(Error::Format(format!(
            "images hold {count} records but labels hold {lbl_count}"
        )));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::Length {
            expected: 8 + count,
            found: lbl_bytes.len(),
        });
    }

    let mut digits = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let pixels = Array2::from_shape_fn((rows, cols), |(r, c)| {
            img_bytes[start + r * cols + c] as f64 / 255.0
        });
        digits.push(RawDigit {
            pixels,
            label: lbl_bytes[8 + i],
        });
    }
    Ok(digits)
}

/// Read an images file, locating the companion labels file by the MNIST
/// naming convention (`...images-idx3...` -> `...labels-idx1...`).
pub fn read_idx_images(images_path: &Path) -> Result<Vec<RawDigit>> {
    let name = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("bad path {}", images_path.display())))?;
    let companion = name.replace("images", "labels").replace("idx3", "idx1");
    if companion == name {
        return Err(Error::Format(format!(
            "cannot derive labels filename from '{name}'; use read_idx_pair"
        )));
    }
    let labels_path = images_path.with_file_name(companion);
    read_idx_pair(images_path, &labels_path)
}

/// Serialize digits back to IDX bytes; used by tests and the data generator.
pub fn write_idx_pair(digits: &[RawDigit]) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = if digits.is_empty() {
        (0, 0)
    } else {
        digits[0].pixels.dim()
    };
    let mut img = Vec::with_capacity(16 + digits.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(digits.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lbl = Vec::with_capacity(8 + digits.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(digits.len() as u32).to_be_bytes());
    for d in digits {
        for v in d.pixels.iter() {
            img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        lbl.push(d.label);
    }
    (img, lbl)
}
