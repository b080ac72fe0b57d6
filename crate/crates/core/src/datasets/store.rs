//! On-disk dataset directories: raw little-endian f32 image arrays plus a
//! JSON manifest carrying the palette, split spec, counts, seed, and
//! per-file checksums.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ImageSample, Palette, SplitSpec, TestSample};
use crate::{sha256_hex, Error, Result};

pub const DATASET_FORMAT: &str = "snd-dataset-v1";

/// A materialized split ready for training/evaluation.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub train: Vec<ImageSample>,
    pub test: Vec<TestSample>,
    pub palette: Palette,
    pub spec: SplitSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train: usize,
    pub test: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub palette: Palette,
    pub spec: SplitSpec,
    pub counts: DatasetCounts,
    pub seed: u64,
    /// SHA-256 per data file, keyed by file name.
    pub checksum: BTreeMap<String, String>,
    /// Hash of the resolved generation config, when produced by the CLI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn images_to_f32_bytes<'a>(images: impl Iterator<Item = &'a Array3<f64>>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for img in images {
        for &v in img.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

fn f32_bytes_to_images(
    bytes: &[u8],
    n: usize,
    shape: (usize, usize, usize),
) -> Result<Vec<Array3<f64>>> {
    let per = shape.0 * shape.1 * shape.2;
    let expected = n * per * 4;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = Array3::<f64>::zeros(shape);
        let slice = img.as_slice_mut().unwrap();
        for (j, v) in slice.iter_mut().enumerate() {
            let off = (i * per + j) * 4;
            *v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as f64;
        }
        out.push(img);
    }
    Ok(out)
}

/// Write a dataset directory; returns the manifest that was stored.
pub fn save_dataset(
    dir: &Path,
    ds: &DatasetDir,
    config_hash: Option<String>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let shape = ds
        .train
        .first()
        .map(|s| s.image.dim())
        .or_else(|| ds.test.first().map(|t| t.sample.image.dim()))
        .ok_or_else(|| Error::Config("cannot save an empty dataset".into()))?;

    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    files.insert(
        "train_images.f32".into(),
        images_to_f32_bytes(ds.train.iter().map(|s| &s.image)),
    );
    files.insert(
        "train_labels.u8".into(),
        ds.train.iter().map(|s| s.class_label).collect(),
    );
    files.insert(
        "train_backgrounds.u8".into(),
        ds.train.iter().map(|s| s.background_id as u8).collect(),
    );
    files.insert(
        "test_images.f32".into(),
        images_to_f32_bytes(ds.test.iter().map(|t| &t.sample.image)),
    );
    files.insert(
        "test_labels.u8".into(),
        ds.test.iter().map(|t| t.sample.class_label).collect(),
    );
    files.insert(
        "test_backgrounds.u8".into(),
        ds.test.iter().map(|t| t.sample.background_id as u8).collect(),
    );
    files.insert(
        "test_novel.u8".into(),
        ds.test.iter().map(|t| u8::from(t.is_novel)).collect(),
    );

    let mut checksum = BTreeMap::new();
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
        checksum.insert(name.clone(), sha256_hex(bytes));
    }

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        palette: ds.palette.clone(),
        spec: ds.spec.clone(),
        counts: DatasetCounts {
            train: ds.train.len(),
            test: ds.test.len(),
            channels: shape.0,
            height: shape.1,
            width: shape.2,
        },
        seed: ds.spec.seed,
        checksum,
        config_hash,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory written by [`save_dataset`], verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<DatasetDir> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "no manifest.json under {}; expected a dataset directory",
            dir.display()
        )));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "dataset format '{}' unsupported (expected {DATASET_FORMAT})",
            manifest.format
        )));
    }
    let read_checked = |name: &str| -> Result<Vec<u8>> {
        let bytes = fs::read(dir.join(name))?;
        match manifest.checksum.get(name) {
            Some(expect) if *expect == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Format(format!("checksum mismatch for {name}"))),
            None => Err(Error::Format(format!("manifest lists no checksum for {name}"))),
        }
    };
    let shape = (
        manifest.counts.channels,
        manifest.counts.height,
        manifest.counts.width,
    );
    let train_images =
        f32_bytes_to_images(&read_checked("train_images.f32")?, manifest.counts.train, shape)?;
    let train_labels = read_checked("train_labels.u8")?;
    let train_bgs = read_checked("train_backgrounds.u8")?;
    let test_images =
        f32_bytes_to_images(&read_checked("test_images.f32")?, manifest.counts.test, shape)?;
    let test_labels = read_checked("test_labels.u8")?;
    let test_bgs = read_checked("test_backgrounds.u8")?;
    let test_novel = read_checked("test_novel.u8")?;
    if train_labels.len() != manifest.counts.train || test_labels.len() != manifest.counts.test {
        return Err(Error::Format("label count disagrees with manifest".into()));
    }

    let train = train_images
        .into_iter()
        .zip(train_labels)
        .zip(train_bgs)
        .map(|((image, class_label), bg)| ImageSample {
            image,
            class_label,
            background_id: bg as usize,
        })
        .collect();
    let test = test_images
        .into_iter()
        .zip(test_labels)
        .zip(test_bgs)
        .zip(test_novel)
        .map(|(((image, class_label), bg), novel)| TestSample {
            sample: ImageSample {
                image,
                class_label,
                background_id: bg as usize,
            },
            is_novel: novel != 0,
        })
        .collect();

    Ok(DatasetDir {
        train,
        test,
        palette: manifest.palette,
        spec: manifest.spec,
    })
}
