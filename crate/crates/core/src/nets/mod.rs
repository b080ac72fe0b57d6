//! The seven-network architecture and its forward paths.
//!
//! An encoder maps images to a shared feature `z_f`, two heads split it into
//! the subject latent `z_s` and background latent `z_b`, a membership net
//! projects `z_b` onto K mixture components, a variational net predicts a
//! diagonal Gaussian over `z_b` given `z_s`, and two decoders reconstruct
//! additively: `x_hat = x_s + x_b`. All forwards run through the autodiff
//! tape; inference inserts parameters as constants so no backward machinery
//! is built.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{Conv2dSpec, ConvT2dSpec, NodeId, Tape};
use crate::datasets::ImageSample;
use crate::{Error, Result};

/// Architecture hyperparameters; fixed at construction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    /// Input image shape (C, H, W).
    pub input: (usize, usize, usize),
    /// Latent dimension d shared by z_f, z_s, z_b.
    pub latent_dim: usize,
    /// Encoder conv widths; decoders mirror them.
    pub conv_channels: [usize; 3],
    /// Hidden width of the membership net.
    pub membership_hidden: usize,
    /// Hidden width of the variational net trunk.
    pub variational_hidden: usize,
    /// Mixture component count K (the number of training backgrounds).
    pub k_backgrounds: usize,
}

impl ArchConfig {
    pub fn new(input: (usize, usize, usize), latent_dim: usize, k_backgrounds: usize) -> Self {
        ArchConfig {
            input,
            latent_dim,
            conv_channels: [32, 64, 128],
            membership_hidden: 32,
            variational_hidden: 64,
            k_backgrounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        if self.k_backgrounds < 2 {
            return Err(Error::Config("k_backgrounds must be at least 2".into()));
        }
        if self.input.1 < 8 || self.input.2 < 8 {
            return Err(Error::Config("input images must be at least 8x8".into()));
        }
        if self.input.1 != self.input.2 {
            return Err(Error::Config("input images must be square".into()));
        }
        Ok(())
    }

    /// Spatial sizes after each stride-2 encoder conv, input first.
    fn spatial_chain(&self) -> [usize; 4] {
        let mut sizes = [self.input.1; 4];
        for i in 1..4 {
            sizes[i] = (sizes[i - 1] + 2 - 3) / 2 + 1;
        }
        sizes
    }

    /// Flattened width at the encoder/decoder junction.
    fn bottleneck(&self) -> usize {
        let s = self.spatial_chain()[3];
        self.conv_channels[2] * s * s
    }
}

pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, in_d: usize, out_d: usize) -> Self {
        let std = (2.0 / in_d as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Linear {
            w: Array2::from_shape_fn((out_d, in_d), |_| dist.sample(rng)),
            b: Array1::zeros(out_d),
        }
    }
}

pub struct ConvLayer {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, spec: Conv2dSpec) -> Self {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        ConvLayer {
            w: Array4::from_shape_fn((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), |_| {
                dist.sample(rng)
            }),
            b: Array1::zeros(spec.out_ch),
            spec,
        }
    }
}

pub struct ConvTLayer {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub spec: ConvT2dSpec,
}

impl ConvTLayer {
    fn init(rng: &mut ChaCha8Rng, spec: ConvT2dSpec) -> Self {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        ConvTLayer {
            w: Array4::from_shape_fn((spec.in_ch, spec.out_ch, spec.kernel, spec.kernel), |_| {
                dist.sample(rng)
            }),
            b: Array1::zeros(spec.out_ch),
            spec,
        }
    }
}

/// G: image -> z_f.
pub struct Encoder {
    pub conv: [ConvLayer; 3],
    pub fc: Linear,
}

/// Two-layer perceptron used for the heads and the membership net.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// The variational net over z_b given z_s: shared trunk, mean and
/// log-variance branches. Log-variances are clamped to [-6, 6].
pub struct Critic {
    pub trunk: Linear,
    pub mean: Linear,
    pub logvar: Linear,
}

/// H': latent -> image.
pub struct Decoder {
    pub fc: Linear,
    pub deconv: [ConvTLayer; 3],
}

/// The seven learnable groups.
pub struct ModelParams {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub subject_head: Mlp,
    pub background_head: Mlp,
    pub critic: Critic,
    pub membership: Mlp,
    pub subject_decoder: Decoder,
    pub background_decoder: Decoder,
}

/// Selector for the seven parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    SubjectHead,
    BackgroundHead,
    Critic,
    Membership,
    SubjectDecoder,
    BackgroundDecoder,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Encoder,
        Group::SubjectHead,
        Group::BackgroundHead,
        Group::Critic,
        Group::Membership,
        Group::SubjectDecoder,
        Group::BackgroundDecoder,
    ];

    /// Everything the encoder-phase optimizer updates (all but the critic).
    pub const NON_CRITIC: [Group; 6] = [
        Group::Encoder,
        Group::SubjectHead,
        Group::BackgroundHead,
        Group::Membership,
        Group::SubjectDecoder,
        Group::BackgroundDecoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::SubjectHead => "subject_head",
            Group::BackgroundHead => "background_head",
            Group::Critic => "critic",
            Group::Membership => "membership",
            Group::SubjectDecoder => "subject_decoder",
            Group::BackgroundDecoder => "background_decoder",
        }
    }
}

impl ModelParams {
    /// Deterministic fan-in-scaled initialization.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.latent_dim;
        let [c1, c2, c3] = arch.conv_channels;
        let (in_ch, _, _) = arch.input;
        let conv_spec = |ic, oc| Conv2dSpec {
            in_ch: ic,
            out_ch: oc,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let sizes = arch.spatial_chain();
        // Decoder sizes walk the chain backwards; out_pad lands each layer
        // exactly on the mirrored encoder size.
        let deconv_spec = |ic, oc, from: usize, to: usize| ConvT2dSpec {
            in_ch: ic,
            out_ch: oc,
            kernel: 3,
            stride: 2,
            pad: 1,
            out_pad: to - (2 * from - 1),
        };
        let encoder = Encoder {
            conv: [
                ConvLayer::init(&mut rng, conv_spec(in_ch, c1)),
                ConvLayer::init(&mut rng, conv_spec(c1, c2)),
                ConvLayer::init(&mut rng, conv_spec(c2, c3)),
            ],
            fc: Linear::init(&mut rng, arch.bottleneck(), d),
        };
        let subject_head = Mlp {
            fc1: Linear::init(&mut rng, d, d),
            fc2: Linear::init(&mut rng, d, d),
        };
        let background_head = Mlp {
            fc1: Linear::init(&mut rng, d, d),
            fc2: Linear::init(&mut rng, d, d),
        };
        let critic = Critic {
            trunk: Linear::init(&mut rng, d, arch.variational_hidden),
            mean: Linear::init(&mut rng, arch.variational_hidden, d),
            logvar: Linear::init(&mut rng, arch.variational_hidden, d),
        };
        let membership = Mlp {
            fc1: Linear::init(&mut rng, d, arch.membership_hidden),
            fc2: Linear::init(&mut rng, arch.membership_hidden, arch.k_backgrounds),
        };
        let mut decoder = || Decoder {
            fc: Linear::init(&mut rng, d, arch.bottleneck()),
            deconv: [
                ConvTLayer::init(&mut rng, deconv_spec(c3, c2, sizes[3], sizes[2])),
                ConvTLayer::init(&mut rng, deconv_spec(c2, c1, sizes[2], sizes[1])),
                ConvTLayer::init(&mut rng, deconv_spec(c1, in_ch, sizes[1], sizes[0])),
            ],
        };
        let subject_decoder = decoder();
        let background_decoder = decoder();
        Ok(ModelParams {
            arch: arch.clone(),
            encoder,
            subject_head,
            background_head,
            critic,
            membership,
            subject_decoder,
            background_decoder,
        })
    }

    /// All tensors of the listed groups as (name, shape, flattened values),
    /// in a stable order.
    pub fn named_tensors(&self, groups: &[Group]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, vals: Vec<f64>| {
            out.push((name, shape, vals));
        };
        let lin = |push: &mut dyn FnMut(String, Vec<usize>, Vec<f64>), prefix: &str, l: &Linear| {
            push(
                format!("{prefix}.w"),
                l.w.shape().to_vec(),
                l.w.iter().copied().collect(),
            );
            push(
                format!("{prefix}.b"),
                l.b.shape().to_vec(),
                l.b.iter().copied().collect(),
            );
        };
        let conv4 =
            |push: &mut dyn FnMut(String, Vec<usize>, Vec<f64>), prefix: &str, w: &Array4<f64>, b: &Array1<f64>| {
                push(
                    format!("{prefix}.w"),
                    w.shape().to_vec(),
                    w.iter().copied().collect(),
                );
                push(
                    format!("{prefix}.b"),
                    b.shape().to_vec(),
                    b.iter().copied().collect(),
                );
            };
        for &g in groups {
            match g {
                Group::Encoder => {
                    for (i, c) in self.encoder.conv.iter().enumerate() {
                        conv4(&mut push, &format!("encoder.conv{}", i + 1), &c.w, &c.b);
                    }
                    lin(&mut push, "encoder.fc", &self.encoder.fc);
                }
                Group::SubjectHead => {
                    lin(&mut push, "subject_head.fc1", &self.subject_head.fc1);
                    lin(&mut push, "subject_head.fc2", &self.subject_head.fc2);
                }
                Group::BackgroundHead => {
                    lin(&mut push, "background_head.fc1", &self.background_head.fc1);
                    lin(&mut push, "background_head.fc2", &self.background_head.fc2);
                }
                Group::Critic => {
                    lin(&mut push, "critic.trunk", &self.critic.trunk);
                    lin(&mut push, "critic.mean", &self.critic.mean);
                    lin(&mut push, "critic.logvar", &self.critic.logvar);
                }
                Group::Membership => {
                    lin(&mut push, "membership.fc1", &self.membership.fc1);
                    lin(&mut push, "membership.fc2", &self.membership.fc2);
                }
                Group::SubjectDecoder => {
                    lin(&mut push, "subject_decoder.fc", &self.subject_decoder.fc);
                    for (i, c) in self.subject_decoder.deconv.iter().enumerate() {
                        conv4(&mut push, &format!("subject_decoder.deconv{}", i + 1), &c.w, &c.b);
                    }
                }
                Group::BackgroundDecoder => {
                    lin(&mut push, "background_decoder.fc", &self.background_decoder.fc);
                    for (i, c) in self.background_decoder.deconv.iter().enumerate() {
                        conv4(&mut push, &format!("background_decoder.deconv{}", i + 1), &c.w, &c.b);
                    }
                }
            }
        }
        out
    }

    /// Mutable flat slices of the listed groups, matching the order of
    /// [`ModelParams::named_tensors`]. Each group may appear at most once.
    pub fn tensor_slices_mut(&mut self, groups: &[Group]) -> Vec<&mut [f64]> {
        // Borrow every group exactly once, then hand out in request order.
        let mut enc: Vec<&mut [f64]> = Vec::new();
        for c in self.encoder.conv.iter_mut() {
            enc.push(c.w.as_slice_mut().unwrap());
            enc.push(c.b.as_slice_mut().unwrap());
        }
        enc.push(self.encoder.fc.w.as_slice_mut().unwrap());
        enc.push(self.encoder.fc.b.as_slice_mut().unwrap());
        let mut sh = Vec::new();
        push_mlp(&mut sh, &mut self.subject_head);
        let mut bh = Vec::new();
        push_mlp(&mut bh, &mut self.background_head);
        let cr: Vec<&mut [f64]> = vec![
            self.critic.trunk.w.as_slice_mut().unwrap(),
            self.critic.trunk.b.as_slice_mut().unwrap(),
            self.critic.mean.w.as_slice_mut().unwrap(),
            self.critic.mean.b.as_slice_mut().unwrap(),
            self.critic.logvar.w.as_slice_mut().unwrap(),
            self.critic.logvar.b.as_slice_mut().unwrap(),
        ];
        let mut mem = Vec::new();
        push_mlp(&mut mem, &mut self.membership);
        let mut sd = Vec::new();
        push_decoder(&mut sd, &mut self.subject_decoder);
        let mut bd = Vec::new();
        push_decoder(&mut bd, &mut self.background_decoder);

        let mut per_group = [
            Some(enc),
            Some(sh),
            Some(bh),
            Some(cr),
            Some(mem),
            Some(sd),
            Some(bd),
        ];
        let mut out = Vec::new();
        for &g in groups {
            let idx = Group::ALL.iter().position(|x| *x == g).unwrap();
            out.extend(per_group[idx].take().expect("group requested twice"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors(&Group::ALL)
            .iter()
            .map(|(_, _, v)| v.len())
            .sum()
    }
}

fn push_mlp<'a>(out: &mut Vec<&'a mut [f64]>, mlp: &'a mut Mlp) {
    out.push(mlp.fc1.w.as_slice_mut().unwrap());
    out.push(mlp.fc1.b.as_slice_mut().unwrap());
    out.push(mlp.fc2.w.as_slice_mut().unwrap());
    out.push(mlp.fc2.b.as_slice_mut().unwrap());
}

fn push_decoder<'a>(out: &mut Vec<&'a mut [f64]>, dec: &'a mut Decoder) {
    out.push(dec.fc.w.as_slice_mut().unwrap());
    out.push(dec.fc.b.as_slice_mut().unwrap());
    for dc in dec.deconv.iter_mut() {
        out.push(dc.w.as_slice_mut().unwrap());
        out.push(dc.b.as_slice_mut().unwrap());
    }
}

/// Latents for one sample.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub z_f: Array1<f64>,
    pub z_s: Array1<f64>,
    pub z_b: Array1<f64>,
}

/// Dual-decoder output; `x_hat` is the elementwise sum of the branches.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub x_s: Array3<f64>,
    pub x_b: Array3<f64>,
    pub x_hat: Array3<f64>,
}

// ---------------------------------------------------------------------------
// Tape-side node bundles and forward builders
// ---------------------------------------------------------------------------

pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

fn linear_nodes(tape: &mut Tape, lin: &Linear, track: bool) -> LinearNodes {
    let (w, b) = (lin.w.clone().into_dyn(), lin.b.clone().into_dyn());
    if track {
        LinearNodes {
            w: tape.leaf(w),
            b: tape.leaf(b),
        }
    } else {
        LinearNodes {
            w: tape.constant(w),
            b: tape.constant(b),
        }
    }
}

fn conv_nodes(tape: &mut Tape, w: &Array4<f64>, b: &Array1<f64>, track: bool) -> LinearNodes {
    let (w, b) = (w.clone().into_dyn(), b.clone().into_dyn());
    if track {
        LinearNodes {
            w: tape.leaf(w),
            b: tape.leaf(b),
        }
    } else {
        LinearNodes {
            w: tape.constant(w),
            b: tape.constant(b),
        }
    }
}

/// `x[B,in] · wᵀ + b`.
pub fn linear_forward(tape: &mut Tape, x: NodeId, nodes: &LinearNodes) -> NodeId {
    let y = tape.matmul_nt(x, nodes.w);
    tape.add_row(y, nodes.b)
}

pub struct EncoderNodes {
    pub conv: [(LinearNodes, Conv2dSpec); 3],
    pub fc: LinearNodes,
}

pub struct MlpNodes {
    pub fc1: LinearNodes,
    pub fc2: LinearNodes,
}

pub struct CriticNodes {
    pub trunk: LinearNodes,
    pub mean: LinearNodes,
    pub logvar: LinearNodes,
}

pub struct DecoderNodes {
    pub fc: LinearNodes,
    pub deconv: [(LinearNodes, ConvT2dSpec); 3],
}

impl Encoder {
    pub fn nodes(&self, tape: &mut Tape, track: bool) -> EncoderNodes {
        EncoderNodes {
            conv: [
                (conv_nodes(tape, &self.conv[0].w, &self.conv[0].b, track), self.conv[0].spec),
                (conv_nodes(tape, &self.conv[1].w, &self.conv[1].b, track), self.conv[1].spec),
                (conv_nodes(tape, &self.conv[2].w, &self.conv[2].b, track), self.conv[2].spec),
            ],
            fc: linear_nodes(tape, &self.fc, track),
        }
    }
}

impl Mlp {
    pub fn nodes(&self, tape: &mut Tape, track: bool) -> MlpNodes {
        MlpNodes {
            fc1: linear_nodes(tape, &self.fc1, track),
            fc2: linear_nodes(tape, &self.fc2, track),
        }
    }
}

impl Critic {
    pub fn nodes(&self, tape: &mut Tape, track: bool) -> CriticNodes {
        CriticNodes {
            trunk: linear_nodes(tape, &self.trunk, track),
            mean: linear_nodes(tape, &self.mean, track),
            logvar: linear_nodes(tape, &self.logvar, track),
        }
    }
}

impl Decoder {
    pub fn nodes(&self, tape: &mut Tape, track: bool) -> DecoderNodes {
        DecoderNodes {
            fc: linear_nodes(tape, &self.fc, track),
            deconv: [
                (conv_nodes(tape, &self.deconv[0].w, &self.deconv[0].b, track), self.deconv[0].spec),
                (conv_nodes(tape, &self.deconv[1].w, &self.deconv[1].b, track), self.deconv[1].spec),
                (conv_nodes(tape, &self.deconv[2].w, &self.deconv[2].b, track), self.deconv[2].spec),
            ],
        }
    }
}

/// `x[B,C,H,W]` -> `z_f[B,d]`.
pub fn encoder_forward(tape: &mut Tape, x: NodeId, enc: &EncoderNodes, arch: &ArchConfig) -> NodeId {
    let mut h = x;
    for (nodes, spec) in &enc.conv {
        h = tape.conv2d(h, nodes.w, nodes.b, *spec);
        h = tape.relu(h);
    }
    let batch = tape.value(h).shape()[0];
    let flat = tape.reshape(h, &[batch, arch.bottleneck()]);
    linear_forward(tape, flat, &enc.fc)
}

/// Two-layer MLP with a ReLU between.
pub fn mlp_forward(tape: &mut Tape, x: NodeId, mlp: &MlpNodes) -> NodeId {
    let h = linear_forward(tape, x, &mlp.fc1);
    let h = tape.relu(h);
    linear_forward(tape, h, &mlp.fc2)
}

/// Variational net: `z_s[B,d]` -> (mean, clamped log-variance), both `[B,d]`.
pub fn critic_forward(tape: &mut Tape, z_s: NodeId, critic: &CriticNodes) -> (NodeId, NodeId) {
    let h = linear_forward(tape, z_s, &critic.trunk);
    let h = tape.relu(h);
    let mean = linear_forward(tape, h, &critic.mean);
    let logvar = linear_forward(tape, h, &critic.logvar);
    let logvar = tape.clamp(logvar, -6.0, 6.0);
    (mean, logvar)
}

/// `z[B,d]` -> image `[B,C,H,W]`. No output activation; the additive
/// decomposition leaves per-branch ranges unconstrained.
pub fn decoder_forward(tape: &mut Tape, z: NodeId, dec: &DecoderNodes, arch: &ArchConfig) -> NodeId {
    let h = linear_forward(tape, z, &dec.fc);
    let h = tape.relu(h);
    let batch = tape.value(h).shape()[0];
    let s = arch.spatial_chain()[3];
    let mut img = tape.reshape(h, &[batch, arch.conv_channels[2], s, s]);
    for (i, (nodes, spec)) in dec.deconv.iter().enumerate() {
        img = tape.conv_transpose2d(img, nodes.w, nodes.b, *spec);
        if i + 1 < dec.deconv.len() {
            img = tape.relu(img);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Inference wrappers
// ---------------------------------------------------------------------------

fn batch_from_images(images: &[&Array3<f64>], arch: &ArchConfig) -> Result<Array4<f64>> {
    let (c, h, w) = arch.input;
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Config(format!(
                "image {i} has shape {:?}, model expects {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

/// Encode a batch `[B,C,H,W]` to `(z_f, z_s, z_b)` matrices `[B,d]`.
pub fn encode_batch(
    params: &ModelParams,
    x: &Array4<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let (c, h, w) = params.arch.input;
    if x.dim().1 != c || x.dim().2 != h || x.dim().3 != w {
        return Err(Error::Config(format!(
            "batch shape {:?} does not match configured input {:?}",
            x.dim(),
            (c, h, w)
        )));
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone().into_dyn());
    let enc = params.encoder.nodes(&mut tape, false);
    let sh = params.subject_head.nodes(&mut tape, false);
    let bh = params.background_head.nodes(&mut tape, false);
    let zf = encoder_forward(&mut tape, xn, &enc, &params.arch);
    let zs = mlp_forward(&mut tape, zf, &sh);
    let zb = mlp_forward(&mut tape, zf, &bh);
    let to2 = |t: &Tape, id: NodeId| {
        t.value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    Ok((to2(&tape, zf), to2(&tape, zs), to2(&tape, zb)))
}

/// Encode one sample to its latent bundle (deterministic inference).
pub fn encode(params: &ModelParams, sample: &ImageSample) -> Result<LatentBundle> {
    let batch = batch_from_images(&[&sample.image], &params.arch)?;
    let (zf, zs, zb) = encode_batch(params, &batch)?;
    Ok(LatentBundle {
        z_f: zf.row(0).to_owned(),
        z_s: zs.row(0).to_owned(),
        z_b: zb.row(0).to_owned(),
    })
}

/// Soft membership vector on the K-simplex for a single background latent.
pub fn memberships(params: &ModelParams, z_b: &Array1<f64>) -> Result<Array1<f64>> {
    let m = memberships_batch(params, &z_b.clone().insert_axis(Axis(0)))?;
    Ok(m.row(0).to_owned())
}

/// Row-wise soft memberships for a batch of background latents `[B,d]`.
pub fn memberships_batch(params: &ModelParams, z_b: &Array2<f64>) -> Result<Array2<f64>> {
    if z_b.ncols() != params.arch.latent_dim {
        return Err(Error::Config(format!(
            "z_b has dim {}, model expects {}",
            z_b.ncols(),
            params.arch.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let zb = tape.constant(z_b.clone().into_dyn());
    let mem = params.membership.nodes(&mut tape, false);
    let logits = mlp_forward(&mut tape, zb, &mem);
    let gamma = tape.softmax_rows(logits);
    Ok(tape
        .value(gamma)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Decode a batch of latent pairs into `(x_s, x_b, x_hat)`.
pub fn decode_batch(
    params: &ModelParams,
    z_s: &Array2<f64>,
    z_b: &Array2<f64>,
) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    let d = params.arch.latent_dim;
    if z_s.ncols() != d || z_b.ncols() != d || z_s.nrows() != z_b.nrows() {
        return Err(Error::Config(format!(
            "latent shapes {:?}/{:?} do not match model dim {d}",
            z_s.dim(),
            z_b.dim()
        )));
    }
    let mut tape = Tape::new();
    let zs = tape.constant(z_s.clone().into_dyn());
    let zb = tape.constant(z_b.clone().into_dyn());
    let sd = params.subject_decoder.nodes(&mut tape, false);
    let bd = params.background_decoder.nodes(&mut tape, false);
    let xs = decoder_forward(&mut tape, zs, &sd, &params.arch);
    let xb = decoder_forward(&mut tape, zb, &bd, &params.arch);
    let xhat = tape.add(xs, xb);
    let to4 = |t: &Tape, id: NodeId| {
        t.value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    };
    Ok((to4(&tape, xs), to4(&tape, xb), to4(&tape, xhat)))
}

/// Decode one latent bundle.
pub fn decode(params: &ModelParams, bundle: &LatentBundle) -> Result<Reconstruction> {
    let zs = bundle.z_s.clone().insert_axis(Axis(0));
    let zb = bundle.z_b.clone().insert_axis(Axis(0));
    let (xs, xb, xhat) = decode_batch(params, &zs, &zb)?;
    Ok(Reconstruction {
        x_s: xs.index_axis(Axis(0), 0).to_owned(),
        x_b: xb.index_axis(Axis(0), 0).to_owned(),
        x_hat: xhat.index_axis(Axis(0), 0).to_owned(),
    })
}

/// Stack samples' images into a `[B,C,H,W]` batch.
pub fn stack_images(samples: &[ImageSample], arch: &ArchConfig) -> Result<Array4<f64>> {
    let refs: Vec<&Array3<f64>> = samples.iter().map(|s| &s.image).collect();
    batch_from_images(&refs, arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn small_arch() -> ArchConfig {
        let mut arch = ArchConfig::new((3, 16, 16), 8, 3);
        arch.conv_channels = [4, 8, 8];
        arch.membership_hidden = 8;
        arch.variational_hidden = 8;
        arch
    }

    fn sample(arch: &ArchConfig, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample {
            image: Array3::from_shape_fn(arch.input, |_| rng.gen_range(0.0..1.0)),
            class_label: 0,
            background_id: 0,
        }
    }

    #[test]
    fn encode_is_finite_and_deterministic() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 1).unwrap();
        let s = sample(&arch, 2);
        let a = encode(&params, &s).unwrap();
        let b = encode(&params, &s).unwrap();
        assert_eq!(a.z_f.len(), arch.latent_dim);
        assert!(a.z_f.iter().all(|v| v.is_finite()));
        assert!(a.z_s.iter().all(|v| v.is_finite()));
        assert!(a.z_b.iter().all(|v| v.is_finite()));
        assert_eq!(a.z_s, b.z_s);
        assert_eq!(a.z_b, b.z_b);
    }

    #[test]
    fn batched_encoding_matches_single_sample_loops() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 3).unwrap();
        let samples: Vec<ImageSample> = (0..4).map(|i| sample(&arch, 10 + i)).collect();
        let batch = stack_images(&samples, &arch).unwrap();
        let (_, zs, zb) = encode_batch(&params, &batch).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let single = encode(&params, s).unwrap();
            for j in 0..arch.latent_dim {
                assert!((zs[[i, j]] - single.z_s[j]).abs() < 1e-12);
                assert!((zb[[i, j]] - single.z_b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn membership_is_on_simplex_and_saturates() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 4).unwrap();
        let z = Array1::from_shape_fn(arch.latent_dim, |i| (i as f64 * 0.37).sin());
        let gamma = memberships(&params, &z).unwrap();
        assert_eq!(gamma.len(), arch.k_backgrounds);
        assert!((gamma.sum() - 1.0).abs() < 1e-6);
        assert!(gamma.iter().all(|&g| g >= 0.0));

        // Softmax of all-zero logits is uniform; a +50 logit saturates.
        let mut tape = Tape::new();
        let zeros = tape.constant(Array2::<f64>::zeros((1, 3)).into_dyn());
        let sm = tape.softmax_rows(zeros);
        for j in 0..3 {
            assert!((tape.value(sm)[[0, j]] - 1.0 / 3.0).abs() < 1e-12);
        }
        let mut logits = Array2::<f64>::zeros((1, 3));
        logits[[0, 1]] = 50.0;
        let big = tape.constant(logits.into_dyn());
        let sm2 = tape.softmax_rows(big);
        assert!(tape.value(sm2)[[0, 1]] >= 1.0 - 1e-9);
    }

    #[test]
    fn decode_additivity_and_shape() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 5).unwrap();
        let bundle = LatentBundle {
            z_f: Array1::zeros(arch.latent_dim),
            z_s: Array1::from_shape_fn(arch.latent_dim, |i| (i as f64).cos()),
            z_b: Array1::from_shape_fn(arch.latent_dim, |i| (i as f64 * 0.5).sin()),
        };
        let rec = decode(&params, &bundle).unwrap();
        assert_eq!(rec.x_hat.dim(), arch.input);
        let max_dev = rec
            .x_hat
            .iter()
            .zip(rec.x_s.iter().zip(rec.x_b.iter()))
            .map(|(h, (s, b))| (h - s - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 1e-6);
    }

    #[test]
    fn decoder_branches_are_separated() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 6).unwrap();
        let z_b = Array2::from_shape_fn((2, arch.latent_dim), |(i, j)| (i + j) as f64 * 0.1);
        let z_s1 = Array2::from_elem((2, arch.latent_dim), 0.3);
        let z_s2 = Array2::from_elem((2, arch.latent_dim), -1.7);
        let (_, xb1, _) = decode_batch(&params, &z_s1, &z_b).unwrap();
        let (_, xb2, _) = decode_batch(&params, &z_s2, &z_b).unwrap();
        assert_eq!(xb1, xb2, "x_b must not depend on z_s");
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let arch = small_arch();
        let params = ModelParams::init(&arch, 7).unwrap();
        let bad = ImageSample {
            image: Array3::zeros((3, 9, 9)),
            class_label: 0,
            background_id: 0,
        };
        match encode(&params, &bad) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn param_count_is_fixed_and_visitation_orders_agree() {
        let arch = small_arch();
        let p1 = ModelParams::init(&arch, 8).unwrap();
        let p2 = ModelParams::init(&arch, 9).unwrap();
        assert_eq!(p1.param_count(), p2.param_count());
        let mut p3 = ModelParams::init(&arch, 8).unwrap();
        let names = p1.named_tensors(&Group::ALL);
        let slices = p3.tensor_slices_mut(&Group::ALL);
        assert_eq!(names.len(), slices.len());
        for ((_, _, vals), slice) in names.iter().zip(slices.iter()) {
            assert_eq!(vals.len(), slice.len());
        }
    }

    #[test]
    fn mnist_scale_shapes_line_up() {
        let arch = ArchConfig::new((3, 28, 28), 32, 3);
        assert_eq!(arch.spatial_chain(), [28, 14, 7, 4]);
        let params = ModelParams::init(&arch, 0).unwrap();
        let s = sample(&arch, 1);
        let bundle = encode(&params, &s).unwrap();
        let rec = decode(&params, &bundle).unwrap();
        assert_eq!(rec.x_hat.dim(), (3, 28, 28));
    }
}
