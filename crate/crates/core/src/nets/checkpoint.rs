//! Single-file checkpoint container.
//!
//! Layout: 8-byte format tag, little-endian u64 JSON header length, JSON
//! header (arch config, training metadata, tensor directory), then all
//! tensor payloads as contiguous little-endian f64. Carries no timestamps,
//! so identical training runs produce byte-identical checkpoints.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::{ArchConfig, Group, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &[u8; 8] = b"SNDCKPT1";

/// Training metadata stored alongside the parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub step_count: usize,
    pub epochs_completed: usize,
    pub seed: u64,
    pub omega1: f64,
    pub omega2: f64,
    /// Hash of the resolved run configuration.
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Serialize all seven parameter groups plus metadata.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let tensors = params.named_tensors(&Group::ALL);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, shape, values) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: 1,
        arch: params.arch.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_FORMAT);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad format tag)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let payload = &bytes[16 + header_len..];

    let mut params = ModelParams::init(&header.arch, 0)
        .map_err(|e| Error::Checkpoint(format!("bad arch in checkpoint: {e}")))?;
    let expected = params.named_tensors(&Group::ALL);
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {} tensors, model has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let slices = params.tensor_slices_mut(&Group::ALL);
    for ((entry, (name, shape, _)), slice) in
        header.tensors.iter().zip(expected.iter()).zip(slices)
    {
        if entry.name != *name || entry.shape != *shape || entry.len != slice.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' does not match model tensor '{}'",
                entry.name, name
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if payload.len() < end {
            return Err(Error::Checkpoint(format!(
                "payload truncated while reading '{}'",
                entry.name
            )));
        }
        for (i, v) in slice.iter_mut().enumerate() {
            let off = start + i * 8;
            *v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        }
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ImageSample;
    use crate::nets::{encode, ArchConfig};
    use ndarray::Array3;
    use tempfile::tempdir;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step_count: 17,
            epochs_completed: 2,
            seed: 9,
            omega1: 0.1,
            omega2: 0.2,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let mut arch = ArchConfig::new((3, 16, 16), 8, 3);
        arch.conv_channels = [4, 8, 8];
        arch.membership_hidden = 8;
        arch.variational_hidden = 8;
        let params = ModelParams::init(&arch, 42).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.sndckpt");
        save_checkpoint(&path, &params, &meta()).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta());
        let probe = ImageSample {
            image: Array3::from_shape_fn(arch.input, |(c, i, j)| {
                ((c + i + j) as f64 * 0.17).sin().abs()
            }),
            class_label: 0,
            background_id: 0,
        };
        let a = encode(&params, &probe).unwrap();
        let b = encode(&loaded, &probe).unwrap();
        for (x, y) in a.z_s.iter().zip(b.z_s.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.z_b.iter().zip(b.z_b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_tag_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(_)) => {}
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("junk file loaded as a checkpoint"),
        }
    }

    #[test]
    fn identical_params_serialize_identically() {
        let mut arch = ArchConfig::new((3, 16, 16), 8, 3);
        arch.conv_channels = [4, 8, 8];
        let p1 = ModelParams::init(&arch, 5).unwrap();
        let p2 = ModelParams::init(&arch, 5).unwrap();
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&a, &p1, &meta()).unwrap();
        save_checkpoint(&b, &p2, &meta()).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}
