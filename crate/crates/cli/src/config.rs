//! Layered run configuration: defaults, then a TOML file, then flags.
//!
//! Unknown keys in the file are rejected outright. Every resolved value
//! remembers where it came from, and the resolved settings hash into a
//! fingerprint that run artifacts embed.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use snd_core::club::CriticObjective;
use snd_core::score::BandwidthMode;
use snd_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Default,
    File,
    Flag,
}

/// File-level configuration; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
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

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: Option<u64>,
    pub omega1: Option<f64>,
    pub omega2: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub latent_dim: Option<usize>,
    pub critic_ratio: Option<usize>,
    pub eps: Option<f64>,
    pub critic_objective: Option<String>,
    pub checkpoint_interval: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub bandwidth: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub classes: Option<Vec<u8>>,
    pub baseline: Option<bool>,
    pub parallel: Option<usize>,
}

pub fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            let cfg: FileConfig = toml::from_str(&text)
                .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", p.display()))?;
            Ok(cfg)
        }
    }
}

/// Tracks per-key provenance while resolving flag/file/default layers.
#[derive(Debug, Default)]
pub struct Resolver {
    pub provenance: BTreeMap<String, Provenance>,
}

impl Resolver {
    pub fn pick<T: Clone>(&mut self, key: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        let (value, prov) = match (flag, file) {
            (Some(v), _) => (v, Provenance::Flag),
            (None, Some(v)) => (v, Provenance::File),
            (None, None) => (default, Provenance::Default),
        };
        self.provenance.insert(key.to_string(), prov);
        value
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.provenance {
            out.push_str(&format!("  {k:<28} <- {v:?}\n"));
        }
        out
    }
}

/// Fully resolved data-generation settings.
#[derive(Debug, Clone, Serialize)]
pub struct DataSettings {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub novel_class: u8,
    pub novel_fraction: f64,
    pub k_backgrounds: usize,
    pub source: String,
    pub mnist_dir: Option<PathBuf>,
    pub synth_pool: usize,
}

impl DataSettings {
    pub fn hash(&self) -> String {
        snd_core::sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

pub fn parse_bandwidth(s: &str) -> anyhow::Result<BandwidthMode> {
    match s {
        "median" | "median_heuristic" => Ok(BandwidthMode::MedianHeuristic),
        "scott" => Ok(BandwidthMode::Scott),
        other => {
            if let Some(v) = other.strip_prefix("fixed:") {
                let h: f64 = v
                    .parse()
                    .map_err(|_| anyhow::anyhow!("bad fixed bandwidth '{v}'"))?;
                Ok(BandwidthMode::Fixed(h))
            } else {
                anyhow::bail!(
                    "unknown bandwidth '{other}' (expected median, scott, or fixed:<h>)"
                )
            }
        }
    }
}

pub fn parse_critic_objective(s: &str) -> anyhow::Result<CriticObjective> {
    match s {
        "mi_upper_bound" | "mi" => Ok(CriticObjective::MiUpperBound),
        "positive_mle" => Ok(CriticObjective::PositiveMle),
        other => anyhow::bail!("unknown critic objective '{other}'"),
    }
}

/// Flags shared by training-style commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    /// Loss weight on the background energy term.
    #[arg(long)]
    pub omega1: Option<f64>,
    /// Loss weight on the mutual-information term.
    #[arg(long)]
    pub omega2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub critic_ratio: Option<usize>,
    /// Variance stabilizer for the mixture statistics.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Critic objective: mi_upper_bound or positive_mle.
    #[arg(long)]
    pub critic_objective: Option<String>,
    /// Epochs between intermediate checkpoints (0 = none).
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
}

/// Merge train settings from flags, file, defaults.
pub fn resolve_train_config(
    resolver: &mut Resolver,
    flags: &TrainFlags,
    seed_flag: Option<u64>,
    file: &TrainSection,
    k_backgrounds: usize,
) -> anyhow::Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let objective_str = resolver.pick(
        "train.critic_objective",
        flags.critic_objective.clone(),
        file.critic_objective.clone(),
        "mi_upper_bound".to_string(),
    );
    let checkpoint_interval = resolver.pick(
        "train.checkpoint_interval",
        flags.checkpoint_interval,
        file.checkpoint_interval,
        0,
    );
    Ok(TrainConfig {
        omega1: resolver.pick("train.omega1", flags.omega1, file.omega1, defaults.omega1),
        omega2: resolver.pick("train.omega2", flags.omega2, file.omega2, defaults.omega2),
        batch_size: resolver.pick(
            "train.batch_size",
            flags.batch_size,
            file.batch_size,
            defaults.batch_size,
        ),
        epochs: resolver.pick("train.epochs", flags.epochs, file.epochs, defaults.epochs),
        learning_rate: resolver.pick(
            "train.learning_rate",
            flags.learning_rate,
            file.learning_rate,
            defaults.learning_rate,
        ),
        seed: resolver.pick("train.seed", seed_flag, file.seed, defaults.seed),
        eps: resolver.pick("train.eps", flags.eps, file.eps, defaults.eps),
        critic_ratio: resolver.pick(
            "train.critic_ratio",
            flags.critic_ratio,
            file.critic_ratio,
            defaults.critic_ratio,
        ),
        latent_dim: resolver.pick(
            "train.latent_dim",
            flags.latent_dim,
            file.latent_dim,
            defaults.latent_dim,
        ),
        k_backgrounds,
        critic_objective: parse_critic_objective(&objective_str)?,
        checkpoint_interval: (checkpoint_interval > 0).then_some(checkpoint_interval),
    })
}
