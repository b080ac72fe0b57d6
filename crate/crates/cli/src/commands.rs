//! Subcommand implementations.

use anyhow::{anyhow, bail, Context};
use ndarray::Array2;
use std::fmt;
use std::path::{Path, PathBuf};

use snd_core::datasets::{
    build_split, load_dataset, read_idx_images, save_dataset, synth_digits, DatasetDir, Palette,
    RawDigit, SplitSpec,
};
use snd_core::evaluator::{
    auprc, auroc, export_latents, pca_2d, run_protocol, scatter_png, ClassResult, EvalReport,
    ProtocolOptions,
};
use snd_core::nets::load_checkpoint;
use snd_core::score::{
    fit_kde, raw_kde_baseline, score_dataset, scores_to_csv, train_subject_features,
};
use snd_core::train::train;

use crate::config::{
    load_file_config, parse_bandwidth, resolve_train_config, DataSettings, Resolver, TrainFlags,
};

/// Marker for operator mistakes (bad flags, missing inputs); exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Named colors available for training backgrounds; green stays unseen.
const TRAIN_COLOR_POOL: [(&str, [f64; 3]); 7] = [
    ("white", [1.0, 1.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

fn palette_for_k(k: usize) -> anyhow::Result<Palette> {
    if k == 0 || k > TRAIN_COLOR_POOL.len() {
        return Err(usage(format!(
            "k_backgrounds must be in 1..={}, got {k}",
            TRAIN_COLOR_POOL.len()
        )));
    }
    let mut names: Vec<String> = TRAIN_COLOR_POOL[..k]
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    names.push("green".into());
    Ok(Palette {
        train_colors: TRAIN_COLOR_POOL[..k].iter().map(|(_, c)| *c).collect(),
        test_unseen_colors: vec![[0.0, 1.0, 0.0]],
        names,
    })
}

fn load_digit_corpus(settings: &DataSettings) -> anyhow::Result<Vec<RawDigit>> {
    match settings.source.as_str() {
        "synthetic" => Ok(synth_digits(settings.synth_pool, settings.seed)),
        "idx" => {
            let dir = settings.mnist_dir.as_ref().ok_or_else(|| {
                usage("source 'idx' needs --mnist-dir pointing at the IDX files")
            })?;
            let train_path = dir.join("train-images-idx3-ubyte");
            if !train_path.exists() {
                return Err(usage(format!(
                    "missing IDX files; expected {} (and its companion {}), \
                     optionally {} as well",
                    train_path.display(),
                    dir.join("train-labels-idx1-ubyte").display(),
                    dir.join("t10k-images-idx3-ubyte").display(),
                )));
            }
            let mut digits = read_idx_images(&train_path)?;
            let t10k = dir.join("t10k-images-idx3-ubyte");
            if t10k.exists() {
                digits.extend(read_idx_images(&t10k)?);
            }
            Ok(digits)
        }
        other => Err(usage(format!(
            "unknown data source '{other}' (expected synthetic or idx)"
        ))),
    }
}

pub struct DataArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub novel_class: Option<u8>,
    pub novel_fraction: Option<f64>,
    pub k_backgrounds: Option<usize>,
    pub source: Option<String>,
    pub mnist_dir: Option<PathBuf>,
    pub synth_pool: Option<usize>,
}

pub fn resolve_data_settings(
    args: &DataArgs,
    resolver: &mut Resolver,
) -> anyhow::Result<DataSettings> {
    let file = load_file_config(args.config.as_deref())?;
    let d = &file.data;
    let n_train = resolver.pick("data.n_train", args.n_train, d.n_train, 2000);
    let n_test = resolver.pick("data.n_test", args.n_test, d.n_test, 1000);
    let settings = DataSettings {
        seed: resolver.pick("data.seed", args.seed, d.seed, 0),
        n_train,
        n_test,
        novel_class: resolver.pick("data.novel_class", args.novel_class, d.novel_class, 7),
        novel_fraction: resolver.pick(
            "data.novel_fraction",
            args.novel_fraction,
            d.novel_fraction,
            0.5,
        ),
        k_backgrounds: resolver.pick(
            "data.k_backgrounds",
            args.k_backgrounds,
            d.k_backgrounds,
            3,
        ),
        source: resolver.pick(
            "data.source",
            args.source.clone(),
            d.source.clone(),
            "synthetic".into(),
        ),
        mnist_dir: args.mnist_dir.clone().or(d.mnist_dir.clone()),
        synth_pool: resolver.pick(
            "data.synth_pool",
            args.synth_pool,
            d.synth_pool,
            4 * (n_train + n_test),
        ),
    };
    if !(0.0..=1.0).contains(&settings.novel_fraction) {
        return Err(usage(format!(
            "novel_fraction {} outside [0,1]",
            settings.novel_fraction
        )));
    }
    Ok(settings)
}

fn split_spec_from(settings: &DataSettings, novel_class: u8) -> SplitSpec {
    let mut spec = SplitSpec::leave_one_out(novel_class, settings.seed);
    spec.n_train = settings.n_train;
    spec.n_test = settings.n_test;
    spec.novel_fraction = settings.novel_fraction;
    spec
}

pub fn cmd_gen_data(args: &DataArgs, out: &Path, verbose: bool) -> anyhow::Result<()> {
    let mut resolver = Resolver::default();
    let settings = resolve_data_settings(args, &mut resolver)?;
    if verbose {
        eprintln!("resolved configuration:\n{}", resolver.render());
    }
    let palette = palette_for_k(settings.k_backgrounds)?;
    palette.validate().map_err(|e| usage(e.to_string()))?;
    let digits = load_digit_corpus(&settings)?;
    let spec = split_spec_from(&settings, settings.novel_class);
    let (train_set, test_set) = build_split(&digits, &palette, &spec)?;
    let ds = DatasetDir {
        train: train_set,
        test: test_set,
        palette,
        spec,
    };
    let manifest = save_dataset(out, &ds, Some(settings.hash()))?;
    println!(
        "wrote dataset to {}: {} train / {} test samples, K={} train colors + {} unseen, seed {}",
        out.display(),
        manifest.counts.train,
        manifest.counts.test,
        manifest.palette.k_train(),
        manifest.palette.k_unseen(),
        manifest.seed
    );
    Ok(())
}

pub fn cmd_train(
    data_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    flags: &TrainFlags,
    k_backgrounds: Option<usize>,
    verbose: bool,
) -> anyhow::Result<()> {
    let ds = load_dataset(data_dir)
        .with_context(|| format!("loading dataset from {}", data_dir.display()))?;
    let file = load_file_config(config)?;
    let mut resolver = Resolver::default();
    let k = k_backgrounds.unwrap_or_else(|| ds.palette.k_train());
    let cfg = resolve_train_config(&mut resolver, flags, seed, &file.train, k)?;
    if verbose {
        eprintln!("resolved configuration:\n{}", resolver.render());
    }
    std::fs::create_dir_all(out)?;
    let (params, log) = train(&ds.train, &cfg, Some(out))?;
    log.write_jsonl(&out.join("train_log.jsonl"))?;

    // Per-epoch component means.
    let epochs = cfg.epochs;
    for e in 0..epochs {
        let recs: Vec<_> = log.records.iter().filter(|r| r.epoch == e).collect();
        if recs.is_empty() {
            continue;
        }
        let n = recs.len() as f64;
        let mean = |f: &dyn Fn(&snd_core::train::StepRecord) -> f64| {
            recs.iter().map(|r| f(r)).sum::<f64>() / n
        };
        println!(
            "epoch {:>3}: l_rec {:>10.4}  e_mean {:>9.4}  mi {:>9.5}  l_total {:>10.4}",
            e,
            mean(&|r| r.l_rec),
            mean(&|r| r.e_mean),
            mean(&|r| r.mi),
            mean(&|r| r.l_total)
        );
    }
    println!(
        "trained {} params for {} steps; checkpoint at {}",
        params.param_count(),
        log.records.len(),
        out.join("model.sndckpt").display()
    );
    Ok(())
}

pub fn cmd_score(
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    bandwidth: Option<&str>,
    baseline: bool,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let ds = load_dataset(data_dir)?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    let file = load_file_config(config)?;
    let mut resolver = Resolver::default();
    let bw_str = resolver.pick(
        "score.bandwidth",
        bandwidth.map(str::to_string),
        file.score.bandwidth.clone(),
        "median".into(),
    );
    let bw = parse_bandwidth(&bw_str).map_err(|e| usage(e.to_string()))?;
    let features = train_subject_features(&ds.train, &params)?;
    let kde = fit_kde(&features, bw)?;
    let rows = score_dataset(&ds.test, &params, &kde)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scores.csv"), scores_to_csv(&rows))?;
    let mut meta_json = serde_json::json!({
        "checkpoint_config_hash": meta.config_hash,
        "bandwidth": kde.bandwidth,
        "bandwidth_mode": bw_str,
        "bank_size": kde.bank_len(),
        "log_space": rows.first().map(|r| r.score.log_space),
        "n_scored": rows.len(),
    });
    if baseline {
        let base_rows = raw_kde_baseline(&ds.train, &ds.test, bw)?;
        std::fs::write(out.join("baseline_scores.csv"), scores_to_csv(&base_rows))?;
        meta_json["baseline"] = serde_json::json!(true);
    }
    std::fs::write(
        out.join("run_meta.json"),
        serde_json::to_vec_pretty(&meta_json)?,
    )?;
    println!(
        "scored {} test samples (bandwidth {:.5}); wrote {}",
        rows.len(),
        kde.bandwidth,
        out.join("scores.csv").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    out: &Path,
    data_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    protocol: bool,
    classes: Option<&str>,
    baseline: bool,
    parallel: Option<usize>,
    bandwidth: Option<&str>,
    data_args: &DataArgs,
    train_flags: &TrainFlags,
    seed: Option<u64>,
    verbose: bool,
) -> anyhow::Result<()> {
    let file = load_file_config(data_args.config.as_deref())?;
    let mut resolver = Resolver::default();
    let bw_str = resolver.pick(
        "score.bandwidth",
        bandwidth.map(str::to_string),
        file.score.bandwidth.clone(),
        "median".into(),
    );
    let bw = parse_bandwidth(&bw_str).map_err(|e| usage(e.to_string()))?;
    let baseline = baseline
        || resolver
            .pick("eval.baseline", None, file.eval.baseline, false);
    let parallel = resolver.pick("eval.parallel", parallel, file.eval.parallel, 1);

    std::fs::create_dir_all(out)?;
    let report = if protocol {
        let settings = resolve_data_settings(data_args, &mut resolver)?;
        let cfg = resolve_train_config(
            &mut resolver,
            train_flags,
            seed,
            &file.train,
            settings.k_backgrounds,
        )?;
        if verbose {
            eprintln!("resolved configuration:\n{}", resolver.render());
        }
        let class_list: Vec<u8> = match classes {
            Some(s) => s
                .split(',')
                .map(|t| t.trim().parse::<u8>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad --classes list: {e}")))?,
            None => file.eval.classes.clone().unwrap_or_else(|| (0..10).collect()),
        };
        if class_list.is_empty() {
            return Err(usage("--classes resolved to an empty list"));
        }
        let palette = palette_for_k(settings.k_backgrounds)?;
        let digits = load_digit_corpus(&settings)?;
        let template = split_spec_from(&settings, class_list[0]);
        let opts = ProtocolOptions {
            bandwidth: bw,
            baseline,
            parallel,
        };
        run_protocol(&digits, &palette, &cfg, &template, &class_list, &opts)
    } else {
        let data_dir = data_dir.ok_or_else(|| {
            usage("single-split eval needs --data (or use --protocol)")
        })?;
        let checkpoint = checkpoint.ok_or_else(|| {
            usage("single-split eval needs --checkpoint (or use --protocol)")
        })?;
        let ds = load_dataset(data_dir)?;
        let (params, _meta) = load_checkpoint(checkpoint)?;
        let cfg = resolve_train_config(
            &mut resolver,
            train_flags,
            seed,
            &file.train,
            ds.palette.k_train(),
        )?;
        let features = train_subject_features(&ds.train, &params)?;
        let kde = fit_kde(&features, bw)?;
        let rows = score_dataset(&ds.test, &params, &kde)?;
        let scores: Vec<f64> = rows.iter().map(|r| r.score.value).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.is_novel).collect();
        let n_novel = labels.iter().filter(|&&n| n).count();
        let mut row = ClassResult {
            novel_class: ds.spec.novel_class,
            auroc: Some(auroc(&scores, &labels)?),
            auprc: Some(auprc(&scores, &labels)?),
            baseline_auroc: None,
            baseline_auprc: None,
            n_normal: labels.len() - n_novel,
            n_novel,
            seed: ds.spec.seed,
            error: None,
        };
        if baseline {
            let base = raw_kde_baseline(&ds.train, &ds.test, bw)?;
            let bscores: Vec<f64> = base.iter().map(|r| r.score.value).collect();
            row.baseline_auroc = auroc(&bscores, &labels).ok();
            row.baseline_auprc = auprc(&bscores, &labels).ok();
        }
        EvalReport::from_rows(vec![row], cfg, ds.spec.clone())
    };

    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let table = report.render_table();
    std::fs::write(out.join("table.txt"), &table)?;
    println!("{table}");
    println!(
        "average AUROC {:.4}, average AUPRC {:.4} (completeness {:.0}%)",
        report.average_auroc,
        report.average_auprc,
        report.completeness * 100.0
    );
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

pub fn cmd_export_latents(
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    split: &str,
) -> anyhow::Result<()> {
    let ds = load_dataset(data_dir)?;
    let (params, _meta) = load_checkpoint(checkpoint)?;
    let data = match split {
        "train" => ds.train.clone(),
        "test" => ds.test.iter().map(|t| t.sample.clone()).collect(),
        other => return Err(usage(format!("unknown split '{other}' (train or test)"))),
    };
    let export = export_latents(&data, &params, out)?;
    println!(
        "exported {} rows to {} plus {} plots",
        export.z_s.nrows(),
        export.csv_path.display(),
        export.plot_paths.len()
    );
    Ok(())
}

/// Re-render pairing plots from an exported latents CSV.
pub fn cmd_plot(latents_csv: &Path, out: &Path, color_by: &str) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(latents_csv)
        .map_err(|e| usage(format!("cannot read {}: {e}", latents_csv.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| usage("empty latents file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let find_block = |prefix: &str| -> Vec<usize> {
        cols.iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    };
    let (zf_cols, zs_cols, zb_cols) = (find_block("z_f_"), find_block("z_s_"), find_block("z_b_"));
    if zf_cols.is_empty() || zs_cols.is_empty() || zb_cols.is_empty() {
        return Err(usage("latents file lacks z_f_/z_s_/z_b_ columns"));
    }
    let group_col = match color_by {
        "class" => 1,
        "background" => 2,
        other => return Err(usage(format!("unknown color-by '{other}'"))),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut groups: Vec<usize> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            bail!("malformed latents row: {line}");
        }
        groups.push(
            fields[group_col]
                .parse::<usize>()
                .map_err(|e| anyhow!("bad group value: {e}"))?,
        );
        rows.push(
            fields
                .iter()
                .map(|f| f.parse::<f64>().unwrap_or(0.0))
                .collect(),
        );
    }
    let take = |idx: &[usize]| -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), idx.len()), |(i, j)| rows[i][idx[j]])
    };
    let (zf, zs, zb) = (take(&zf_cols), take(&zs_cols), take(&zb_cols));
    std::fs::create_dir_all(out)?;
    for (name, a, b) in [
        ("subject_vs_background.png", &zs, &zb),
        ("subject_vs_original.png", &zs, &zf),
        ("background_vs_original.png", &zb, &zf),
    ] {
        let n = a.nrows();
        let mut stacked = Array2::zeros((2 * n, a.ncols()));
        stacked.slice_mut(ndarray::s![..n, ..]).assign(a);
        stacked.slice_mut(ndarray::s![n.., ..]).assign(b);
        let projected = pca_2d(&stacked);
        let mut color_groups = groups.clone();
        color_groups.extend(groups.iter().copied());
        scatter_png(&out.join(name), &projected, &color_groups)?;
    }
    println!("wrote 3 plots to {}", out.display());
    Ok(())
}
