//! Generic class-folder ingestion for image corpora.
//!
//! Expected layouts:
//!   root/<class>/<image files>
//!   root/<domain>/<class>/<image files>
//! With a domain level, each top directory (sorted by name) becomes a
//! background id. Files that fail to decode are skipped and counted.

use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::Path;

use super::ImageSample;
use crate::{Error, Result};

/// Ingestion result: samples plus a count of undecodable files.
#[derive(Debug)]
pub struct FolderIngest {
    pub samples: Vec<ImageSample>,
    pub skipped: usize,
}

fn decode_image(path: &Path, resolution: usize) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::<f64>::zeros((3, resolution, resolution));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_files(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn ingest_class_dir(
    dir: &Path,
    class_map: &BTreeMap<String, u8>,
    background_id: usize,
    resolution: usize,
    out: &mut FolderIngest,
) -> Result<()> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let label = *class_map
        .get(&name)
        .ok_or_else(|| Error::UnknownClass(name.clone()))?;
    for file in sorted_files(dir)? {
        match decode_image(&file, resolution) {
            Ok(image) => out.samples.push(ImageSample {
                image,
                class_label: label,
                background_id,
            }),
            Err(_) => out.skipped += 1,
        }
    }
    Ok(())
}

/// Walk `root` and build samples, resized to `resolution` x `resolution`.
pub fn ingest_image_folder(
    root: &Path,
    class_map: &BTreeMap<String, u8>,
    resolution: usize,
) -> Result<FolderIngest> {
    let mut out = FolderIngest {
        samples: Vec::new(),
        skipped: 0,
    };
    let top = sorted_dirs(root)?;
    // Domain level iff no top dir is itself a class and every top dir holds
    // subdirectories; otherwise the top dirs must be classes.
    let has_domain_level = !top.is_empty()
        && top.iter().all(|d| {
            let not_class = d
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| !class_map.contains_key(n))
                .unwrap_or(true);
            not_class && sorted_dirs(d).map(|s| !s.is_empty()).unwrap_or(false)
        });
    if has_domain_level {
        for (domain_idx, domain_dir) in top.iter().enumerate() {
            for class_dir in sorted_dirs(domain_dir)? {
                ingest_class_dir(&class_dir, class_map, domain_idx, resolution, &mut out)?;
            }
        }
    } else {
        for class_dir in top {
            ingest_class_dir(&class_dir, class_map, 0, resolution, &mut out)?;
        }
    }
    Ok(out)
}
