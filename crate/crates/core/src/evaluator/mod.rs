//! Metrics and the held-out-class evaluation protocol.
//!
//! AUROC is the Mann-Whitney statistic with ties counted half; AUPRC is
//! average precision with tied scores grouped. The protocol holds out each
//! listed class in turn: train on the rest with seen backgrounds, test
//! normals on unseen backgrounds, score with KDE on subject features, and
//! optionally run the raw-pixel control for every cell.

mod latents;

pub use latents::{export_latents, pca_2d, scatter_png, LatentExport};

use serde::{Deserialize, Serialize};

use crate::datasets::{build_split, Palette, RawDigit, SplitSpec};
use crate::score::{
    fit_kde, raw_kde_baseline, score_dataset, train_subject_features, BandwidthMode, ScoredSample,
};
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

/// AUROC: probability that a novel sample outranks a normal one, ties ½.
pub fn auroc(scores: &[f64], is_novel: &[bool]) -> Result<f64> {
    if scores.len() != is_novel.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            is_novel.len()
        )));
    }
    let n_novel = is_novel.iter().filter(|&&n| n).count();
    let n_normal = is_novel.len() - n_novel;
    if n_novel == 0 || n_normal == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both novel and normal samples".into(),
        ));
    }
    // Average ranks over tie groups (1-based), then the Mann-Whitney U.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_novel = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if is_novel[idx] {
                rank_sum_novel += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_novel - (n_novel * (n_novel + 1)) as f64 / 2.0;
    Ok(u / (n_novel as f64 * n_normal as f64))
}

/// AUPRC as average precision: step-wise integral of precision over recall
/// at each distinct score threshold, descending, tied scores grouped.
pub fn auprc(scores: &[f64], is_novel: &[bool]) -> Result<f64> {
    if scores.len() != is_novel.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            is_novel.len()
        )));
    }
    let n_novel = is_novel.iter().filter(|&&n| n).count();
    if n_novel == 0 {
        return Err(Error::UndefinedMetric(
            "AUPRC needs at least one novel sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if is_novel[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_novel as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Metrics for one held-out class, or the failure that prevented them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassResult {
    pub novel_class: u8,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub baseline_auroc: Option<f64>,
    pub baseline_auprc: Option<f64>,
    pub n_normal: usize,
    pub n_novel: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Protocol output: per-class rows plus averages over the successful cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassResult>,
    pub average_auroc: f64,
    pub average_auprc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_average_auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_average_auprc: Option<f64>,
    /// Fraction of requested cells that completed.
    pub completeness: f64,
    pub train_config: TrainConfig,
    pub split_template: SplitSpec,
    pub config_hash: String,
}

impl EvalReport {
    /// Assemble a report from per-class rows, averaging over successes.
    pub fn from_rows(
        per_class: Vec<ClassResult>,
        train_config: TrainConfig,
        split_template: SplitSpec,
    ) -> Self {
        let ok: Vec<&ClassResult> = per_class.iter().filter(|r| r.error.is_none()).collect();
        let avg = |f: &dyn Fn(&ClassResult) -> Option<f64>| -> f64 {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let baseline_present = ok.iter().any(|r| r.baseline_auroc.is_some());
        let config_hash = train_config.hash();
        EvalReport {
            average_auroc: avg(&|r| r.auroc),
            average_auprc: avg(&|r| r.auprc),
            baseline_average_auroc: baseline_present.then(|| avg(&|r| r.baseline_auroc)),
            baseline_average_auprc: baseline_present.then(|| avg(&|r| r.baseline_auprc)),
            completeness: if per_class.is_empty() {
                0.0
            } else {
                ok.len() as f64 / per_class.len() as f64
            },
            per_class,
            train_config,
            split_template,
            config_hash,
        }
    }

    /// Text table, one column per held-out class plus the average.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:>7.2}", x * 100.0),
            None => format!("{:>7}", "-"),
        };
        let mut head = format!("{:<16}", "Method");
        for r in &self.per_class {
            head.push_str(&format!("{:>8}", r.novel_class));
        }
        head.push_str(&format!("{:>9}", "Average"));
        let mut snd = format!("{:<16}", "SND (AUROC)");
        for r in &self.per_class {
            snd.push_str(&format!(" {}", fmt(r.auroc)));
        }
        snd.push_str(&format!("  {}", fmt(Some(self.average_auroc))));
        let mut out = format!("{head}\n{snd}\n");
        if self.baseline_average_auroc.is_some() {
            let mut base = format!("{:<16}", "RawKDE (AUROC)");
            for r in &self.per_class {
                base.push_str(&format!(" {}", fmt(r.baseline_auroc)));
            }
            base.push_str(&format!("  {}", fmt(self.baseline_average_auroc)));
            out.push_str(&base);
            out.push('\n');
        }
        let mut prc = format!("{:<16}", "SND (AUPRC)");
        for r in &self.per_class {
            prc.push_str(&format!(" {}", fmt(r.auprc)));
        }
        prc.push_str(&format!("  {}", fmt(Some(self.average_auprc))));
        out.push_str(&prc);
        out.push('\n');
        out
    }
}

/// Options for a protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    pub bandwidth: BandwidthMode,
    /// Also run the raw-pixel KDE control per cell.
    pub baseline: bool,
    /// Worker threads across cells (1 = sequential).
    pub parallel: usize,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            bandwidth: BandwidthMode::MedianHeuristic,
            baseline: false,
            parallel: 1,
        }
    }
}

/// Run one held-out-class cell end to end.
pub fn run_cell(
    digits: &[RawDigit],
    palette: &Palette,
    cfg: &TrainConfig,
    split: &SplitSpec,
) -> Result<(Vec<ScoredSample>, Option<Vec<ScoredSample>>)> {
    let (train_set, test_set) = build_split(digits, palette, split)?;
    let (params, _log) = train(&train_set, cfg, None)?;
    let features = train_subject_features(&train_set, &params)?;
    let kde = fit_kde(&features, BandwidthMode::MedianHeuristic)?;
    let rows = score_dataset(&test_set, &params, &kde)?;
    Ok((rows, None))
}

fn eval_cell(
    digits: &[RawDigit],
    palette: &Palette,
    cfg: &TrainConfig,
    template: &SplitSpec,
    novel_class: u8,
    opts: &ProtocolOptions,
) -> ClassResult {
    let mut split = template.clone();
    split.novel_class = novel_class;
    split.normal_classes = {
        let mut all: std::collections::BTreeSet<u8> =
            digits.iter().map(|d| d.label).collect();
        all.remove(&novel_class);
        all
    };
    let mut result = ClassResult {
        novel_class,
        auroc: None,
        auprc: None,
        baseline_auroc: None,
        baseline_auprc: None,
        n_normal: 0,
        n_novel: 0,
        seed: split.seed,
        error: None,
    };
    let run = || -> Result<(Vec<ScoredSample>, Option<Vec<ScoredSample>>)> {
        let (train_set, test_set) = build_split(digits, palette, &split)?;
        let (params, _log) = train(&train_set, cfg, None)?;
        let features = train_subject_features(&train_set, &params)?;
        let kde = fit_kde(&features, opts.bandwidth)?;
        let rows = score_dataset(&test_set, &params, &kde)?;
        let baseline = if opts.baseline {
            Some(raw_kde_baseline(&train_set, &test_set, opts.bandwidth)?)
        } else {
            None
        };
        Ok((rows, baseline))
    };
    match run() {
        Ok((rows, baseline)) => {
            let scores: Vec<f64> = rows.iter().map(|r| r.score.value).collect();
            let labels: Vec<bool> = rows.iter().map(|r| r.is_novel).collect();
            result.n_novel = labels.iter().filter(|&&n| n).count();
            result.n_normal = labels.len() - result.n_novel;
            match (auroc(&scores, &labels), auprc(&scores, &labels)) {
                (Ok(roc), Ok(prc)) => {
                    result.auroc = Some(roc);
                    result.auprc = Some(prc);
                }
                (roc, prc) => {
                    result.error = Some(format!("metrics failed: {roc:?} / {prc:?}"));
                }
            }
            if let Some(rows) = baseline {
                let scores: Vec<f64> = rows.iter().map(|r| r.score.value).collect();
                result.baseline_auroc = auroc(&scores, &labels).ok();
                result.baseline_auprc = auprc(&scores, &labels).ok();
            }
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// Leave-one-class-out over `classes`: one training run per held-out class.
/// Failures are recorded per cell; averages cover the successful cells.
pub fn run_protocol(
    digits: &[RawDigit],
    palette: &Palette,
    cfg: &TrainConfig,
    template: &SplitSpec,
    classes: &[u8],
    opts: &ProtocolOptions,
) -> EvalReport {
    let rows: Vec<ClassResult> = if opts.parallel > 1 {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<std::sync::Mutex<Option<ClassResult>>> =
            classes.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..opts.parallel.min(classes.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= classes.len() {
                        break;
                    }
                    let r = eval_cell(digits, palette, cfg, template, classes[i], opts);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("cell completed"))
            .collect()
    } else {
        classes
            .iter()
            .map(|&c| eval_cell(digits, palette, cfg, template, c, opts))
            .collect()
    };
    EvalReport::from_rows(rows, cfg.clone(), template.clone())
}
