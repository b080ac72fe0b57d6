//! Latent export and 2-D projection plots.
//!
//! Writes one CSV row per sample with all three latents, and renders scatter
//! plots of the three feature pairings (subject/background, subject/shared,
//! background/shared) in a common principal-component basis. PCA is used
//! instead of t-SNE so the plots are deterministic.

use ndarray::{Array1, Array2, Axis};
use std::path::{Path, PathBuf};

use crate::datasets::ImageSample;
use crate::nets::{encode_batch, stack_images, ModelParams};
use crate::Result;

/// Export outcome: the latent matrices and the files written.
pub struct LatentExport {
    pub z_f: Array2<f64>,
    pub z_s: Array2<f64>,
    pub z_b: Array2<f64>,
    pub csv_path: PathBuf,
    pub plot_paths: Vec<PathBuf>,
}

/// Top-2 principal-component projection of `x[N,d]`, deterministic.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Array2::zeros((n, 2));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean.clone().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n as f64;

    // Power iteration with deflation; fixed start vector, fixed rounds.
    let mut components: Vec<Array1<f64>> = Vec::new();
    let mut cov_work = cov.clone();
    for _ in 0..2 {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + i as f64 / d as f64);
        let norm0 = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm0);
        for _ in 0..300 {
            let mut next = cov_work.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            next.mapv_inplace(|x| x / norm);
            v = next;
        }
        let eigval = v.dot(&cov_work.dot(&v));
        // Deflate: C <- C − λ v vᵀ
        for i in 0..d {
            for j in 0..d {
                cov_work[[i, j]] -= eigval * v[i] * v[j];
            }
        }
        components.push(v);
    }
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        for (c, comp) in components.iter().enumerate() {
            out[[i, c]] = centered.row(i).dot(comp);
        }
    }
    out
}

const DOT_COLORS: [[u8; 3]; 8] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
    [127, 127, 127],
    [188, 189, 34],
];

/// Render a scatter of 2-D points to a PNG, one color per group id.
pub fn scatter_png(path: &Path, points: &Array2<f64>, groups: &[usize]) -> Result<()> {
    const SIZE: u32 = 640;
    const MARGIN: f64 = 24.0;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let n = points.nrows();
    if n > 0 {
        let (mut xmin, mut xmax, mut ymin, mut ymax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            xmin = xmin.min(points[[i, 0]]);
            xmax = xmax.max(points[[i, 0]]);
            ymin = ymin.min(points[[i, 1]]);
            ymax = ymax.max(points[[i, 1]]);
        }
        let xspan = (xmax - xmin).max(1e-12);
        let yspan = (ymax - ymin).max(1e-12);
        let scale = SIZE as f64 - 2.0 * MARGIN;
        for i in 0..n {
            let px = MARGIN + (points[[i, 0]] - xmin) / xspan * scale;
            let py = MARGIN + (points[[i, 1]] - ymin) / yspan * scale;
            let color = DOT_COLORS[groups.get(i).copied().unwrap_or(0) % DOT_COLORS.len()];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (px as i64 + dx, py as i64 + dy);
                    if x >= 0 && y >= 0 && (x as u32) < SIZE && (y as u32) < SIZE {
                        img.put_pixel(x as u32, y as u32, image::Rgb(color));
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| crate::Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn pairing_plot(
    dir: &Path,
    name: &str,
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<PathBuf> {
    // Joint PCA basis over the union, colored by feature type.
    let n = a.nrows();
    let mut stacked = Array2::zeros((2 * n, a.ncols()));
    stacked.slice_mut(ndarray::s![..n, ..]).assign(a);
    stacked.slice_mut(ndarray::s![n.., ..]).assign(b);
    let projected = pca_2d(&stacked);
    let groups: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    let path = dir.join(name);
    scatter_png(&path, &projected, &groups)?;
    Ok(path)
}

/// Encode `data`, write `latents.csv` plus the three pairing plots.
pub fn export_latents(
    data: &[ImageSample],
    params: &ModelParams,
    out_dir: &Path,
) -> Result<LatentExport> {
    std::fs::create_dir_all(out_dir)?;
    let x = stack_images(data, &params.arch)?;
    let (z_f, z_s, z_b) = encode_batch(params, &x)?;
    let d = params.arch.latent_dim;

    let mut csv = String::from("sample_id,class_label,background_id");
    for prefix in ["z_f", "z_s", "z_b"] {
        for j in 0..d {
            csv.push_str(&format!(",{prefix}_{j}"));
        }
    }
    csv.push('\n');
    for (i, s) in data.iter().enumerate() {
        csv.push_str(&format!("{},{},{}", i, s.class_label, s.background_id));
        for m in [&z_f, &z_s, &z_b] {
            for j in 0..d {
                csv.push_str(&format!(",{}", m[[i, j]]));
            }
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join("latents.csv");
    std::fs::write(&csv_path, csv)?;

    let plot_paths = vec![
        pairing_plot(out_dir, "subject_vs_background.png", &z_s, &z_b)?,
        pairing_plot(out_dir, "subject_vs_original.png", &z_s, &z_f)?,
        pairing_plot(out_dir, "background_vs_original.png", &z_b, &z_f)?,
    ];
    Ok(LatentExport {
        z_f,
        z_s,
        z_b,
        csv_path,
        plot_paths,
    })
}
