//! Composite objective and the alternating training loop.
//!
//! Per mini-batch: the critic phase updates only the variational net to
//! tighten the MI bound (latents detached), then one encoder phase updates
//! every other group against `L_rec + ω₁·mean-energy + ω₂·MI` with the
//! variational net frozen. Two optimizer instances keep the update targets
//! disjoint. Runs are bit-reproducible for a fixed seed.

use ndarray::{Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::ad::{NodeId, Tape};
use crate::club::{self, ClubMode, CriticObjective};
use crate::datasets::ImageSample;
use crate::gmm;
use crate::nets::{
    decoder_forward, encoder_forward, mlp_forward, save_checkpoint, stack_images, ArchConfig,
    CheckpointMeta, DecoderNodes, EncoderNodes, Group, MlpNodes, ModelParams,
};
use crate::{sha256_hex, Error, Result};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Weight ω₁ on the background energy term.
    pub omega1: f64,
    /// Weight ω₂ on the mutual-information term.
    pub omega2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Variance stabilizer ε for the mixture statistics.
    pub eps: f64,
    /// Critic updates per encoder update.
    pub critic_ratio: usize,
    pub latent_dim: usize,
    pub k_backgrounds: usize,
    pub critic_objective: CriticObjective,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            omega1: 0.1,
            omega2: 0.1,
            batch_size: 128,
            epochs: 100,
            learning_rate: 1e-3,
            seed: 0,
            eps: 1e-6,
            critic_ratio: 5,
            latent_dim: 32,
            k_backgrounds: 3,
            critic_objective: CriticObjective::PositiveMle,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config; embedded in artifacts.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Logged loss components for a single encoder step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_rec: f64,
    pub e_mean: f64,
    pub mi: f64,
    pub l_total: f64,
    /// Wall-clock for the step; excluded from determinism comparisons.
    pub wall_ms: f64,
}

/// Full run log; serializes to line-delimited JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub critic_steps: usize,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&serde_json::json!({
                "type": "header",
                "seed": self.seed,
                "config_hash": self.config_hash,
                "critic_steps": self.critic_steps,
            }))
            .unwrap(),
        );
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Squared L2 reconstruction error summed over pixels, averaged over the
/// batch dimension.
pub fn reconstruction_loss(x: &Array4<f64>, x_hat: &Array4<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "reconstruction shapes disagree: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let batch = x.dim().0.max(1);
    let sum: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / batch as f64)
}

/// Loss components of one forward pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_rec: f64,
    pub e_mean: f64,
    pub mi: f64,
    pub l_total: f64,
}

struct NonCriticNodes {
    enc: EncoderNodes,
    sh: MlpNodes,
    bh: MlpNodes,
    mem: MlpNodes,
    sd: DecoderNodes,
    bd: DecoderNodes,
}

impl NonCriticNodes {
    fn insert(tape: &mut Tape, params: &ModelParams, track: bool) -> Self {
        NonCriticNodes {
            enc: params.encoder.nodes(tape, track),
            sh: params.subject_head.nodes(tape, track),
            bh: params.background_head.nodes(tape, track),
            mem: params.membership.nodes(tape, track),
            sd: params.subject_decoder.nodes(tape, track),
            bd: params.background_decoder.nodes(tape, track),
        }
    }

    /// Leaf ids in [`Group::NON_CRITIC`] tensor order.
    fn flat_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(28);
        for (nodes, _) in &self.enc.conv {
            ids.push(nodes.w);
            ids.push(nodes.b);
        }
        ids.push(self.enc.fc.w);
        ids.push(self.enc.fc.b);
        for mlp in [&self.sh, &self.bh] {
            ids.extend([mlp.fc1.w, mlp.fc1.b, mlp.fc2.w, mlp.fc2.b]);
        }
        ids.extend([self.mem.fc1.w, self.mem.fc1.b, self.mem.fc2.w, self.mem.fc2.b]);
        for dec in [&self.sd, &self.bd] {
            ids.push(dec.fc.w);
            ids.push(dec.fc.b);
            for (nodes, _) in &dec.deconv {
                ids.push(nodes.w);
                ids.push(nodes.b);
            }
        }
        ids
    }
}

struct EncoderPhase {
    components: LossComponents,
    total: NodeId,
    tape: Tape,
    param_ids: Vec<NodeId>,
}

/// One full forward pass of the composite objective with the variational net
/// frozen. `track` controls whether the non-critic parameters are leaves.
fn encoder_phase_graph(
    x: &Array4<f64>,
    params: &ModelParams,
    cfg: &TrainConfig,
    track: bool,
) -> EncoderPhase {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone().into_dyn());
    let nodes = NonCriticNodes::insert(&mut tape, params, track);
    let critic_nodes = params.critic.nodes(&mut tape, false);

    let zf = encoder_forward(&mut tape, xn, &nodes.enc, &params.arch);
    let zs = mlp_forward(&mut tape, zf, &nodes.sh);
    let zb = mlp_forward(&mut tape, zf, &nodes.bh);
    let logits = mlp_forward(&mut tape, zb, &nodes.mem);
    let gamma = tape.softmax_rows(logits);
    let (_, _, e_mean) = gmm::energy_batch_node(&mut tape, zb, gamma, cfg.eps);
    let xs = decoder_forward(&mut tape, zs, &nodes.sd, &params.arch);
    let xb = decoder_forward(&mut tape, zb, &nodes.bd, &params.arch);
    let xhat = tape.add(xs, xb);
    let diff = tape.sub(xn, xhat);
    let sq = tape.sqr(diff);
    let sq_sum = tape.sum_all(sq);
    let l_rec = tape.mul_scalar(sq_sum, 1.0 / x.dim().0 as f64);
    let mi = club::mi_node(&mut tape, zs, zb, &critic_nodes);

    let e_w = tape.mul_scalar(e_mean, cfg.omega1);
    let mi_w = tape.mul_scalar(mi, cfg.omega2);
    let partial = tape.add(l_rec, e_w);
    let total = tape.add(partial, mi_w);

    let components = LossComponents {
        l_rec: tape.scalar(l_rec),
        e_mean: tape.scalar(e_mean),
        mi: tape.scalar(mi),
        l_total: tape.scalar(total),
    };
    EncoderPhase {
        components,
        total,
        param_ids: nodes.flat_ids(),
        tape,
    }
}

/// Evaluate the composite loss on a batch without updating anything.
pub fn total_loss(
    batch: &[ImageSample],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(f64, LossComponents)> {
    if batch.len() < 2 {
        return Err(Error::Config("total_loss needs a batch of at least 2".into()));
    }
    let x = stack_images(batch, &params.arch)?;
    let phase = encoder_phase_graph(&x, params, cfg, false);
    Ok((phase.components.l_total, phase.components))
}

/// Adam over a fixed list of flat tensors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn step(&mut self, tensors: &mut [&mut [f64]], grads: &[ArrayD<f64>]) {
        assert_eq!(tensors.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((tensor, grad), (m, v)) in tensors
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = grad.as_slice().expect("grad is standard layout");
            for i in 0..tensor.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Train on a split. Only the pixel data of `data` is read; labels and
/// background ids stay out of the optimization entirely.
///
/// Checkpoints go to `ckpt_dir` (final `model.sndckpt`, plus
/// `model_epoch{N}.sndckpt` at the configured interval).
pub fn train(
    data: &[ImageSample],
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let input = data[0].image.dim();
    let arch = ArchConfig::new(input, cfg.latent_dim, cfg.k_backgrounds);
    let mut params = ModelParams::init(&arch, cfg.seed)?;
    let config_hash = cfg.hash();

    let non_critic_sizes: Vec<usize> = params
        .named_tensors(&Group::NON_CRITIC)
        .iter()
        .map(|(_, _, v)| v.len())
        .collect();
    let critic_sizes: Vec<usize> = params
        .named_tensors(&[Group::Critic])
        .iter()
        .map(|(_, _, v)| v.len())
        .collect();
    let mut adam_main = Adam::new(cfg.learning_rate, &non_critic_sizes);
    let mut adam_critic = Adam::new(cfg.learning_rate, &critic_sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        critic_steps: 0,
        records: Vec::new(),
    };
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            // A trailing singleton cannot support batch statistics.
            if chunk.len() < 2 {
                continue;
            }
            let t0 = Instant::now();
            let batch: Vec<ImageSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let x = stack_images(&batch, &arch)?;

            // Latents are fixed during critic-only updates: encode once.
            let critic_latents = if cfg.critic_ratio > 0 {
                let (_, zs, zb) = crate::nets::encode_batch(&params, &x)?;
                Some((zs, zb))
            } else {
                None
            };
            for _ in 0..cfg.critic_ratio {
                let (zs, zb) = critic_latents.as_ref().unwrap();
                let club_step = club::club_update_step(
                    zs,
                    zb,
                    &params.critic,
                    ClubMode::Critic,
                    cfg.critic_objective,
                )?;
                if !club_step.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        l_rec: f64::NAN,
                        e_mean: f64::NAN,
                        mi: club_step.mi,
                    });
                }
                let mut slices = params.tensor_slices_mut(&[Group::Critic]);
                adam_critic.step(&mut slices, &club_step.critic_grads);
                log.critic_steps += 1;
            }

            let phase = encoder_phase_graph(&x, &params, cfg, true);
            let c = phase.components;
            if !c.l_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    l_rec: c.l_rec,
                    e_mean: c.e_mean,
                    mi: c.mi,
                });
            }
            let grads = phase.tape.backward(phase.total);
            let grad_arrays: Vec<ArrayD<f64>> = phase
                .param_ids
                .iter()
                .map(|&id| grads.dense(&phase.tape, id))
                .collect();
            drop(phase.tape);
            let mut slices = params.tensor_slices_mut(&Group::NON_CRITIC);
            adam_main.step(&mut slices, &grad_arrays);

            step += 1;
            log.records.push(StepRecord {
                step,
                epoch,
                l_rec: c.l_rec,
                e_mean: c.e_mean,
                mi: c.mi,
                l_total: c.l_total,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }

        if let (Some(dir), Some(interval)) = (ckpt_dir, cfg.checkpoint_interval) {
            if interval > 0 && (epoch + 1) % interval == 0 && epoch + 1 < cfg.epochs {
                let meta = CheckpointMeta {
                    step_count: step,
                    epochs_completed: epoch + 1,
                    seed: cfg.seed,
                    omega1: cfg.omega1,
                    omega2: cfg.omega2,
                    config_hash: config_hash.clone(),
                };
                save_checkpoint(&dir.join(format!("model_epoch{}.sndckpt", epoch + 1)), &params, &meta)?;
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        let meta = CheckpointMeta {
            step_count: step,
            epochs_completed: cfg.epochs,
            seed: cfg.seed,
            omega1: cfg.omega1,
            omega2: cfg.omega2,
            config_hash: config_hash.clone(),
        };
        save_checkpoint(&dir.join("model.sndckpt"), &params, &meta)?;
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::numeric_grad_entry;
    use crate::datasets::{build_split, synth_digits, Palette, SplitSpec};
    use ndarray::Array3;
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 1,
            latent_dim: 8,
            k_backgrounds: 3,
            ..TrainConfig::default()
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<ImageSample> {
        let digits = synth_digits(n * 2 + 60, seed);
        let palette = Palette::default_mnist();
        let mut spec = SplitSpec::leave_one_out(9, seed);
        spec.n_train = n;
        spec.n_test = 4;
        let (train, _) = build_split(&digits, &palette, &spec).unwrap();
        train
    }

    #[test]
    fn reconstruction_loss_cases() {
        let x = Array4::<f64>::zeros((1, 3, 2, 2));
        let x_hat = Array4::<f64>::from_elem((1, 3, 2, 2), 0.5);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert!((reconstruction_loss(&x, &x_hat).unwrap() - 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let a = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let b = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let got = reconstruction_loss(&a, &b).unwrap();
        let mut oracle = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            oracle += (x - y) * (x - y);
        }
        oracle /= 2.0;
        assert!((got - oracle).abs() < 1e-10);

        let bad = Array4::<f64>::zeros((1, 3, 2, 3));
        assert!(reconstruction_loss(&x, &bad).is_err());
    }

    #[test]
    fn zero_weights_reduce_total_to_reconstruction() {
        let samples = toy_samples(8, 60);
        let mut cfg = small_cfg();
        cfg.omega1 = 0.0;
        cfg.omega2 = 0.0;
        let arch = ArchConfig::new(samples[0].image.dim(), cfg.latent_dim, cfg.k_backgrounds);
        let params = ModelParams::init(&arch, 1).unwrap();
        let (total, c) = total_loss(&samples, &params, &cfg).unwrap();
        assert_eq!(total, c.l_rec);
    }

    #[test]
    fn total_loss_is_linear_in_energy_weight() {
        let samples = toy_samples(8, 61);
        let mut cfg = small_cfg();
        cfg.omega1 = 0.3;
        let arch = ArchConfig::new(samples[0].image.dim(), cfg.latent_dim, cfg.k_backgrounds);
        let params = ModelParams::init(&arch, 2).unwrap();
        let (t1, c1) = total_loss(&samples, &params, &cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.omega1 = 0.6;
        let (t2, _) = total_loss(&samples, &params, &cfg2).unwrap();
        assert!((t2 - t1 - 0.3 * c1.e_mean).abs() < 1e-9);
        // Component recomposition.
        assert!((t1 - (c1.l_rec + cfg.omega1 * c1.e_mean + cfg.omega2 * c1.mi)).abs() < 1e-6);
    }

    #[test]
    fn total_loss_gradient_matches_fd_on_probe_params() {
        let samples = toy_samples(6, 62);
        let mut cfg = small_cfg();
        cfg.batch_size = 6;
        let arch = {
            let mut a = ArchConfig::new(samples[0].image.dim(), cfg.latent_dim, cfg.k_backgrounds);
            a.conv_channels = [4, 8, 8];
            a.membership_hidden = 8;
            a.variational_hidden = 8;
            a
        };
        let mut params = ModelParams::init(&arch, 3).unwrap();
        let x = stack_images(&samples, &arch).unwrap();
        let phase = encoder_phase_graph(&x, &params, &cfg, true);
        let grads = phase.tape.backward(phase.total);
        // Probe the first encoder conv weight and a subject-head weight.
        let enc_w_grad = grads.dense(&phase.tape, phase.param_ids[0]);
        let sh_w_grad = grads.dense(&phase.tape, phase.param_ids[8]);
        drop(phase.tape);

        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for (tensor_idx, analytic) in [(0usize, enc_w_grad), (8usize, sh_w_grad)] {
            for _ in 0..3 {
                let flat_idx = rng.gen_range(0..analytic.len());
                let cfg2 = cfg.clone();
                let samples2 = samples.clone();
                let orig = {
                    let slices = params.tensor_slices_mut(&Group::NON_CRITIC);
                    slices[tensor_idx][flat_idx]
                };
                let mut probe = ndarray::arr1(&[orig]).into_dyn();
                let num = numeric_grad_entry(
                    &mut |v: &ArrayD<f64>| {
                        let mut slices = params.tensor_slices_mut(&Group::NON_CRITIC);
                        slices[tensor_idx][flat_idx] = v[[0]];
                        let (t, _) = total_loss(&samples2, &params, &cfg2).unwrap();
                        let mut slices = params.tensor_slices_mut(&Group::NON_CRITIC);
                        slices[tensor_idx][flat_idx] = orig;
                        t
                    },
                    &mut probe,
                    0,
                    1e-5,
                );
                let a = analytic.as_slice().unwrap()[flat_idx];
                assert!(
                    (a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4,
                    "tensor {tensor_idx} entry {flat_idx}: reverse {a} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn schedule_arithmetic_one_epoch() {
        let samples = toy_samples(64, 64);
        let mut cfg = small_cfg();
        cfg.batch_size = 32;
        cfg.epochs = 1;
        cfg.critic_ratio = 2;
        let (_, log) = train(&samples, &cfg, None).unwrap();
        assert_eq!(log.records.len(), 2, "expected exactly 2 encoder steps");
        assert_eq!(log.critic_steps, 4, "expected 2 * critic_ratio critic steps");
        for r in &log.records {
            let recombined = r.l_rec + cfg.omega1 * r.e_mean + cfg.omega2 * r.mi;
            assert!((r.l_total - recombined).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let samples = toy_samples(24, 65);
        let mut cfg = small_cfg();
        cfg.batch_size = 8;
        cfg.epochs = 2;
        let (p1, log1) = train(&samples, &cfg, None).unwrap();
        let (p2, log2) = train(&samples, &cfg, None).unwrap();
        let t1 = p1.named_tensors(&Group::ALL);
        let t2 = p2.named_tensors(&Group::ALL);
        for ((n1, _, v1), (_, _, v2)) in t1.iter().zip(t2.iter()) {
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert!((a - b).abs() < 1e-6, "{n1} differs between runs");
            }
        }
        assert_eq!(log1.records.len(), log2.records.len());
        for (a, b) in log1.records.iter().zip(log2.records.iter()) {
            assert_eq!(a.l_total, b.l_total);
        }
    }

    #[test]
    fn without_mi_weight_and_critic_steps_theta_m_is_untouched() {
        let samples = toy_samples(12, 66);
        let mut cfg = small_cfg();
        cfg.batch_size = 6;
        cfg.omega2 = 0.0;
        cfg.critic_ratio = 0;
        let arch = ArchConfig::new(samples[0].image.dim(), cfg.latent_dim, cfg.k_backgrounds);
        let fresh = ModelParams::init(&arch, cfg.seed).unwrap();
        let before = fresh.named_tensors(&[Group::Critic]);
        let (trained, _) = train(&samples, &cfg, None).unwrap();
        let after = trained.named_tensors(&[Group::Critic]);
        for ((n, _, v1), (_, _, v2)) in before.iter().zip(after.iter()) {
            assert_eq!(v1, v2, "{n} changed despite omega2=0 and no critic steps");
        }
    }

    #[test]
    fn smoke_run_reconstruction_improves() {
        let samples = toy_samples(60, 67);
        let mut cfg = small_cfg();
        cfg.batch_size = 20;
        cfg.epochs = 6;
        let (_, log) = train(&samples, &cfg, None).unwrap();
        let first_epoch: f64 = log
            .records
            .iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.l_rec)
            .sum::<f64>()
            / log.records.iter().filter(|r| r.epoch == 0).count() as f64;
        let last_epoch: f64 = log
            .records
            .iter()
            .filter(|r| r.epoch == cfg.epochs - 1)
            .map(|r| r.l_rec)
            .sum::<f64>()
            / log
                .records
                .iter()
                .filter(|r| r.epoch == cfg.epochs - 1)
                .count() as f64;
        assert!(
            last_epoch < first_epoch,
            "reconstruction did not improve: {first_epoch} -> {last_epoch}"
        );
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut samples = toy_samples(8, 68);
        samples[0].image = Array3::from_elem(samples[0].image.dim(), f64::NAN);
        let mut cfg = small_cfg();
        cfg.batch_size = 8;
        match train(&samples, &cfg, None) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }
}
