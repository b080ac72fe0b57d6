//! Multi-background digit data: ingestion, colorization, splits.
//!
//! Training images carry an unknown background drawn from K seen colors;
//! normal test images switch to unseen colors while novel-class test images
//! mix seen and unseen. Background ids are recorded on every sample but are
//! evaluation bookkeeping only: the trainer reads nothing except the pixels.

mod folder;
mod idx;
mod store;
mod synth;

pub use folder::{ingest_image_folder, FolderIngest};
pub use idx::{read_idx_images, read_idx_pair, write_idx_pair};
pub use store::{load_dataset, save_dataset, DatasetDir, DatasetManifest};
pub use synth::synth_digits;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::{Error, Result};

/// A grayscale source digit; intensity 1.0 is ink, 0.0 is blank page.
#[derive(Debug, Clone)]
pub struct RawDigit {
    pub pixels: Array2<f64>,
    pub label: u8,
}

/// Background color sets: K training colors plus K' colors reserved for test.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Palette {
    pub train_colors: Vec<[f64; 3]>,
    pub test_unseen_colors: Vec<[f64; 3]>,
    /// One name per color, training colors first.
    pub names: Vec<String>,
}

impl Palette {
    /// White/yellow/blue for training, green held out.
    pub fn default_mnist() -> Self {
        Palette {
            train_colors: vec![[1.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            test_unseen_colors: vec![[0.0, 1.0, 0.0]],
            names: vec![
                "white".into(),
                "yellow".into(),
                "blue".into(),
                "green".into(),
            ],
        }
    }

    pub fn k_train(&self) -> usize {
        self.train_colors.len()
    }

    pub fn k_unseen(&self) -> usize {
        self.test_unseen_colors.len()
    }

    /// Color for a combined-palette background id.
    pub fn color(&self, background_id: usize) -> Option<[f64; 3]> {
        let k = self.k_train();
        if background_id < k {
            Some(self.train_colors[background_id])
        } else {
            self.test_unseen_colors.get(background_id - k).copied()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_colors.is_empty() {
            return Err(Error::Config("palette needs at least one training color".into()));
        }
        let all: Vec<[f64; 3]> = self
            .train_colors
            .iter()
            .chain(self.test_unseen_colors.iter())
            .copied()
            .collect();
        for c in &all {
            if c.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "palette color component out of [0,1]: {c:?}"
                )));
            }
        }
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                if all[i] == all[j] {
                    return Err(Error::Config(format!(
                        "palette colors {i} and {j} are identical"
                    )));
                }
            }
        }
        if self.names.len() != all.len() {
            return Err(Error::Config(format!(
                "palette has {} colors but {} names",
                all.len(),
                self.names.len()
            )));
        }
        Ok(())
    }
}

/// One colorized sample: `[3,H,W]` in [0,1]. The background id indexes the
/// combined palette and exists for evaluation only.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Array3<f64>,
    pub class_label: u8,
    pub background_id: usize,
}

/// A test sample with its ground-truth novelty flag.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub sample: ImageSample,
    pub is_novel: bool,
}

/// Which backgrounds normal test samples may use.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NormalTestBackgrounds {
    UnseenOnly,
}

/// Which backgrounds novel test samples may use.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NovelTestBackgrounds {
    SeenAndUnseen,
}

/// Recipe for one leave-one-class-out split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub normal_classes: BTreeSet<u8>,
    pub novel_class: u8,
    pub normal_test_background_mode: NormalTestBackgrounds,
    pub novel_test_background_mode: NovelTestBackgrounds,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of the test set drawn from the novel class.
    pub novel_fraction: f64,
    /// Balance training draws across normal classes (±1 per class).
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    /// Nine-normal/one-novel split with desk-scale defaults.
    pub fn leave_one_out(novel_class: u8, seed: u64) -> Self {
        let normal_classes = (0u8..10).filter(|&c| c != novel_class).collect();
        SplitSpec {
            normal_classes,
            novel_class,
            normal_test_background_mode: NormalTestBackgrounds::UnseenOnly,
            novel_test_background_mode: NovelTestBackgrounds::SeenAndUnseen,
            n_train: 2000,
            n_test: 1000,
            novel_fraction: 0.5,
            stratified: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal_classes.contains(&self.novel_class) {
            return Err(Error::Config(format!(
                "novel class {} is listed as normal",
                self.novel_class
            )));
        }
        if self.normal_classes.is_empty() {
            return Err(Error::Config("no normal classes".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.novel_fraction) {
            return Err(Error::Config(format!(
                "novel_fraction {} outside [0,1]",
                self.novel_fraction
            )));
        }
        Ok(())
    }
}

/// Place a grayscale digit on a colored field: per channel,
/// `out_c = (1 − v)·bg_c`, so full-ink pixels go black and blank pixels take
/// the background color exactly.
pub fn colorize(digit: &RawDigit, bg: [f64; 3], background_id: usize) -> ImageSample {
    let (h, w) = digit.pixels.dim();
    let mut image = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                image[[c, i, j]] = (1.0 - digit.pixels[[i, j]]) * bg[c];
            }
        }
    }
    ImageSample {
        image,
        class_label: digit.label,
        background_id,
    }
}

/// Materialize one train/test split according to `spec`.
///
/// Source digits are consumed without replacement, so train and test never
/// share a source image. Train backgrounds are drawn uniformly from the seen
/// colors, normal test samples use only unseen colors, and novel test
/// samples draw uniformly from the combined palette.
pub fn build_split(
    digits: &[RawDigit],
    palette: &Palette,
    spec: &SplitSpec,
) -> Result<(Vec<ImageSample>, Vec<TestSample>)> {
    spec.validate()?;
    palette.validate()?;
    if palette.k_unseen() == 0 {
        return Err(Error::Config("palette has no unseen colors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Per-class index pools, shuffled once.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, d) in digits.iter().enumerate() {
        pools[d.label as usize].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }

    let classes: Vec<u8> = spec.normal_classes.iter().copied().collect();
    let n_novel_test = (spec.n_test as f64 * spec.novel_fraction).round() as usize;
    let n_normal_test = spec.n_test - n_novel_test;

    let take = |pools: &mut Vec<Vec<usize>>, class: u8, n: usize| -> Result<Vec<usize>> {
        let pool = &mut pools[class as usize];
        if pool.len() < n {
            return Err(Error::Capacity(format!(
                "class {class}: requested {n} digits, {} available",
                pool.len()
            )));
        }
        Ok(pool.split_off(pool.len() - n))
    };

    // Training draws.
    let mut train_src: Vec<usize> = Vec::with_capacity(spec.n_train);
    if spec.stratified {
        let base = spec.n_train / classes.len();
        let extra = spec.n_train % classes.len();
        for (ci, &class) in classes.iter().enumerate() {
            let quota = base + usize::from(ci < extra);
            train_src.extend(take(&mut pools, class, quota)?);
        }
    } else {
        for _ in 0..spec.n_train {
            let class = classes[rng.gen_range(0..classes.len())];
            train_src.extend(take(&mut pools, class, 1)?);
        }
    }
    train_src.shuffle(&mut rng);

    let k = palette.k_train();
    let k_total = k + palette.k_unseen();
    let mut train = Vec::with_capacity(train_src.len());
    for &src in &train_src {
        let bg_id = rng.gen_range(0..k);
        train.push(colorize(&digits[src], palette.train_colors[bg_id], bg_id));
    }

    // Normal test draws: stratified across normal classes, unseen colors only.
    let mut test = Vec::with_capacity(spec.n_test);
    let base = n_normal_test / classes.len();
    let extra = n_normal_test % classes.len();
    for (ci, &class) in classes.iter().enumerate() {
        let quota = base + usize::from(ci < extra);
        for src in take(&mut pools, class, quota)? {
            let u = rng.gen_range(0..palette.k_unseen());
            let bg_id = k + u;
            test.push(TestSample {
                sample: colorize(&digits[src], palette.test_unseen_colors[u], bg_id),
                is_novel: false,
            });
        }
    }

    // Novel test draws: combined palette.
    for src in take(&mut pools, spec.novel_class, n_novel_test)? {
        let bg_id = rng.gen_range(0..k_total);
        let color = palette.color(bg_id).unwrap();
        test.push(TestSample {
            sample: colorize(&digits[src], color, bg_id),
            is_novel: true,
        });
    }
    test.shuffle(&mut rng);

    Ok((train, test))
}
