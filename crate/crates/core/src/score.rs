//! KDE novelty scoring on subject features, plus a raw-pixel control.
//!
//! The score of a query is the negative Gaussian-kernel density over the
//! training bank. Densities are computed in log space; when any query in a
//! batch would underflow (routine at d = 32), the whole batch switches to
//! negative log-density, which preserves the ranking that AUROC/AUPRC
//! consume. The two conventions are never mixed within one score set.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::datasets::{ImageSample, TestSample};
use crate::nets::{encode_batch, stack_images, ModelParams};
use crate::parallel;
use crate::{Error, Result};

/// Bank size cap; larger feature sets are subsampled with a fixed stride.
const BANK_CAP: usize = 10_000;
/// Pairwise-distance subsample cap for the median heuristic.
const MEDIAN_CAP: usize = 2_000;
/// Bandwidth fallback when every bank point coincides.
const DEGENERATE_BANDWIDTH: f64 = 1e-3;

/// log-density range within which `exp` is comfortably representable.
const LOG_REPRESENTABLE_LO: f64 = -690.0;
const LOG_REPRESENTABLE_HI: f64 = 690.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthMode {
    Fixed(f64),
    /// Median pairwise distance / sqrt(2) over a capped subsample.
    MedianHeuristic,
    /// `N^(-1/(d+4))` times the mean per-dimension (population) std.
    Scott,
}

/// Fitted estimator: the feature bank and resolved bandwidth.
#[derive(Debug, Clone)]
pub struct KdeModel {
    bank: Array2<f64>,
    pub bandwidth: f64,
    pub dim: usize,
    /// Set when the bandwidth collapsed to the degenerate fallback.
    pub degenerate_bandwidth: bool,
}

/// One score; higher always means more novel, in either representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoveltyScore {
    pub value: f64,
    /// False: `value` is the negative density. True: negative log-density.
    pub log_space: bool,
}

/// A scored test sample.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub sample_id: usize,
    pub class_label: u8,
    pub background_id: usize,
    pub is_novel: bool,
    pub score: NoveltyScore,
}

fn strided_subsample(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

/// Fit the estimator on `[N,d]` training features.
pub fn fit_kde(features: &Array2<f64>, mode: BandwidthMode) -> Result<KdeModel> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Config("cannot fit a KDE on an empty bank".into()));
    }
    let d = features.ncols();
    let bank = if n > BANK_CAP {
        let idx = strided_subsample(n, BANK_CAP);
        features.select(Axis(0), &idx)
    } else {
        features.clone()
    };

    let (mut h, mut degenerate) = match mode {
        BandwidthMode::Fixed(h) => {
            if h <= 0.0 {
                return Err(Error::Config(format!("fixed bandwidth {h} must be positive")));
            }
            (h, false)
        }
        BandwidthMode::MedianHeuristic => {
            let idx = strided_subsample(bank.nrows(), MEDIAN_CAP);
            let mut dists = Vec::with_capacity(idx.len() * (idx.len().saturating_sub(1)) / 2);
            for a in 0..idx.len() {
                for b in (a + 1)..idx.len() {
                    let ra = bank.row(idx[a]);
                    let rb = bank.row(idx[b]);
                    let d2: f64 = ra
                        .iter()
                        .zip(rb.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    dists.push(d2.sqrt());
                }
            }
            if dists.is_empty() {
                (0.0, false)
            } else {
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mid = dists.len() / 2;
                let median = if dists.len() % 2 == 1 {
                    dists[mid]
                } else {
                    0.5 * (dists[mid - 1] + dists[mid])
                };
                (median / std::f64::consts::SQRT_2, false)
            }
        }
        BandwidthMode::Scott => {
            let n_f = bank.nrows() as f64;
            let mut mean_std = 0.0;
            for j in 0..d {
                let col = bank.column(j);
                let mean = col.sum() / n_f;
                let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n_f;
                mean_std += var.sqrt();
            }
            mean_std /= d as f64;
            (n_f.powf(-1.0 / (d as f64 + 4.0)) * mean_std, false)
        }
    };
    if h <= 0.0 {
        h = DEGENERATE_BANDWIDTH;
        degenerate = true;
    }
    Ok(KdeModel {
        bank,
        bandwidth: h,
        dim: d,
        degenerate_bandwidth: degenerate,
    })
}

impl KdeModel {
    pub fn bank_len(&self) -> usize {
        self.bank.nrows()
    }

    /// log p̂(z) = logsumexp_i(−‖z−z_i‖²/(2h²)) − log N − (d/2)·log(2πh²).
    pub fn log_density(&self, z: ArrayView1<'_, f64>) -> f64 {
        assert_eq!(z.len(), self.dim, "query dimension mismatch");
        let h2 = self.bandwidth * self.bandwidth;
        let mut max = f64::NEG_INFINITY;
        let mut exponents = Vec::with_capacity(self.bank.nrows());
        for row in self.bank.rows() {
            let d2: f64 = row
                .iter()
                .zip(z.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let e = -d2 / (2.0 * h2);
            if e > max {
                max = e;
            }
            exponents.push(e);
        }
        let sum: f64 = exponents.iter().map(|&e| (e - max).exp()).sum();
        max + sum.ln()
            - (self.bank.nrows() as f64).ln()
            - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * h2).ln()
    }

    /// Log-densities for a query batch, parallel over queries.
    pub fn log_densities(&self, queries: &Array2<f64>) -> Vec<f64> {
        parallel::map_indexed(queries.nrows(), |i| self.log_density(queries.row(i)))
    }

    /// Sequential twin of [`KdeModel::log_densities`]; exists so the bench
    /// suite can compare the two directly.
    pub fn log_densities_seq(&self, queries: &Array2<f64>) -> Vec<f64> {
        parallel::map_indexed_seq(queries.nrows(), |i| self.log_density(queries.row(i)))
    }
}

fn representable(logp: f64) -> bool {
    (LOG_REPRESENTABLE_LO..=LOG_REPRESENTABLE_HI).contains(&logp)
}

/// Score one query. Falls back to negative log-density when the density
/// itself is unrepresentable.
pub fn novelty_score(z_new: &Array1<f64>, kde: &KdeModel) -> NoveltyScore {
    let logp = kde.log_density(z_new.view());
    if representable(logp) {
        NoveltyScore {
            value: -logp.exp(),
            log_space: false,
        }
    } else {
        NoveltyScore {
            value: -logp,
            log_space: true,
        }
    }
}

/// Scores for a query batch under one shared representation: if any query's
/// density would underflow, the entire batch reports negative log-density.
pub fn novelty_scores_batch(queries: &Array2<f64>, kde: &KdeModel) -> Vec<NoveltyScore> {
    let logps = kde.log_densities(queries);
    let all_representable = logps.iter().all(|&lp| representable(lp));
    logps
        .into_iter()
        .map(|lp| {
            if all_representable {
                NoveltyScore {
                    value: -lp.exp(),
                    log_space: false,
                }
            } else {
                NoveltyScore {
                    value: -lp,
                    log_space: true,
                }
            }
        })
        .collect()
}

/// Encode test images to subject features and score them against the bank.
/// Output order follows the input.
pub fn score_dataset(
    test: &[TestSample],
    params: &ModelParams,
    kde: &KdeModel,
) -> Result<Vec<ScoredSample>> {
    if kde.dim != params.arch.latent_dim {
        return Err(Error::Config(format!(
            "KDE dimension {} does not match checkpoint latent dim {}",
            kde.dim, params.arch.latent_dim
        )));
    }
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let images: Vec<ImageSample> = test.iter().map(|t| t.sample.clone()).collect();
    let x = stack_images(&images, &params.arch)?;
    let (_, zs, _) = encode_batch(params, &x)?;
    let scores = novelty_scores_batch(&zs, kde);
    Ok(test
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (t, score))| ScoredSample {
            sample_id: i,
            class_label: t.sample.class_label,
            background_id: t.sample.background_id,
            is_novel: t.is_novel,
            score,
        })
        .collect())
}

/// Subject features of a training split under a trained model; the KDE bank.
pub fn train_subject_features(train: &[ImageSample], params: &ModelParams) -> Result<Array2<f64>> {
    let x = stack_images(train, &params.arch)?;
    let (_, zs, _) = encode_batch(params, &x)?;
    Ok(zs)
}

/// Control condition: the same KDE applied to flattened pixels, skipping the
/// learned representation entirely.
pub fn raw_kde_baseline(
    train: &[ImageSample],
    test: &[TestSample],
    mode: BandwidthMode,
) -> Result<Vec<ScoredSample>> {
    let Some(first) = train.first() else {
        return Err(Error::Config("baseline needs training images".into()));
    };
    let shape = first.image.dim();
    let dim = shape.0 * shape.1 * shape.2;
    let flatten = |img: &ndarray::Array3<f64>| -> Result<Array1<f64>> {
        if img.dim() != shape {
            return Err(Error::Shape(format!(
                "image shape {:?} differs from {:?}",
                img.dim(),
                shape
            )));
        }
        Ok(Array1::from_iter(img.iter().copied()))
    };
    let mut bank = Array2::zeros((train.len(), dim));
    for (i, s) in train.iter().enumerate() {
        bank.row_mut(i).assign(&flatten(&s.image)?);
    }
    let kde = fit_kde(&bank, mode)?;
    let mut queries = Array2::zeros((test.len(), dim));
    for (i, t) in test.iter().enumerate() {
        queries.row_mut(i).assign(&flatten(&t.sample.image)?);
    }
    let scores = novelty_scores_batch(&queries, &kde);
    Ok(test
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (t, score))| ScoredSample {
            sample_id: i,
            class_label: t.sample.class_label,
            background_id: t.sample.background_id,
            is_novel: t.is_novel,
            score,
        })
        .collect())
}

/// CSV rows in the persisted score-file layout.
pub fn scores_to_csv(rows: &[ScoredSample]) -> String {
    let mut out = String::from("sample_id,class_label,background_id,is_novel,score,log_space\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.class_label,
            r.background_id,
            r.is_novel as u8,
            r.score.value,
            r.score.log_space as u8
        ));
    }
    out
}
