//! Miniature conditional denoiser plus per-band control branches.
//!
//! Base network (width `W`, latent channels `C`):
//!
//! ```text
//! x ─ stem(3x3, C→W) ─ block1(3x3, W→W, +emb, relu) ─┬─ down(3x3/2, W→2W) ─ block2(3x3, 2W→2W, +emb, relu)
//!                                              h1 │                                                   │ h2
//!                                                 └──────────────── + ─ up(3x3, 2W→W) ─ upsample2x ───┘
//!                                                                   │
//!                                          block3(3x3, W→W, +emb, relu) ─ head(3x3, W→C) ─ eps_hat
//! ```
//!
//! Time and label embeddings enter every block as per-channel additive
//! biases. A control branch is a private copy of the encoder half
//! (stem..block2) that also sees the control signal through a bias-free hint
//! convolution added after its stem. Its full- and half-resolution features
//! pass through zero-initialized 1x1 convolutions and are added to the base
//! `h1` and `h2`, so a freshly attached branch leaves the base output
//! bit-identical.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::filters::{ffm, make_mask, BandKind, BandMask};
use crate::nn::{self, relu_backward, upsample2x, upsample2x_backward, Conv2d, Linear};
use crate::seed;
use crate::tensor::{Real, Shape, SpatialTensor};

/// Width of the sinusoidal time embedding and of the label embedding.
pub const EMBED_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Latent channels.
    pub channels: usize,
    /// Number of label tokens.
    pub vocab: usize,
    /// Full-resolution feature width; the half-resolution width is doubled.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 12,
            vocab: 16,
            width: 32,
        }
    }
}

/// Sinusoidal time features: 16 sines then 16 cosines at geometric
/// frequencies `10000^(-k/16)`, `k = 0..16`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding<T = f32>(pub Vec<T>);

pub fn time_embed<T: Real>(t: usize) -> TimeEmbedding<T> {
    let half = EMBED_DIM / 2;
    let mut v = vec![T::zero(); EMBED_DIM];
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        v[k] = T::lit(arg.sin());
        v[half + k] = T::lit(arg.cos());
    }
    TimeEmbedding(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f32> {
    pub vocab: usize,
    pub dim: usize,
    pub table: Vec<T>,
}

impl<T: Real> Embedding<T> {
    pub fn row(&self, id: usize) -> &[T] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }
}

/// Maps the shared time and label features to one block's channel biases.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEmbedding<T = f32> {
    pub time: Linear<T>,
    pub cond: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNet<T = f32> {
    pub stem: Conv2d<T>,
    pub block1: Conv2d<T>,
    pub down: Conv2d<T>,
    pub block2: Conv2d<T>,
    pub up: Conv2d<T>,
    pub block3: Conv2d<T>,
    pub head: Conv2d<T>,
    pub time_fc1: Linear<T>,
    pub time_fc2: Linear<T>,
    pub cond_table: Embedding<T>,
    pub emb1: BlockEmbedding<T>,
    pub emb2: BlockEmbedding<T>,
    pub emb3: BlockEmbedding<T>,
}

/// Trainable control path for one frequency band.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBranch<T = f32> {
    pub hint: Conv2d<T>,
    pub stem: Conv2d<T>,
    pub block1: Conv2d<T>,
    pub down: Conv2d<T>,
    pub block2: Conv2d<T>,
    pub zero0: Conv2d<T>,
    pub zero1: Conv2d<T>,
}

/// Optimizer steps applied to each parameter group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingProgress {
    pub base_steps: u64,
    pub branch_steps: BTreeMap<BandKind, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub base: BaseNet<T>,
    pub branches: BTreeMap<BandKind, ControlBranch<T>>,
    pub progress: TrainingProgress,
}

/// Parameter group updated by an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Base convolutions, time/label projections and the label table.
    Base,
    /// One branch's hint, encoder copy and zero convolutions.
    Branch(BandKind),
}

impl Trainable {
    /// Whether the parameter named `name` belongs to this group.
    pub fn owns(&self, name: &str) -> bool {
        match self {
            Trainable::Base => name.starts_with("base."),
            Trainable::Branch(kind) => name
                .strip_prefix("branch.")
                .and_then(|rest| rest.strip_prefix(kind.key().as_str()))
                .is_some_and(|rest| rest.starts_with('.')),
        }
    }
}

pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [T],
}

pub struct NamedTensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a mut [T],
}

trait Params<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>);
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.kernel"),
            shape: self.kernel_shape().to_vec(),
            values: &self.kernel,
        });
        if let Some(b) = &self.bias {
            out.push(NamedTensor {
                name: format!("{prefix}.bias"),
                shape: vec![self.cout],
                values: b,
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        let shape = self.kernel_shape().to_vec();
        let cout = self.cout;
        out.push(NamedTensorMut {
            name: format!("{prefix}.kernel"),
            shape,
            values: &mut self.kernel,
        });
        if let Some(b) = &mut self.bias {
            out.push(NamedTensorMut {
                name: format!("{prefix}.bias"),
                shape: vec![cout],
                values: b,
            });
        }
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.weight"),
            shape: vec![self.fan_out, self.fan_in],
            values: &self.weight,
        });
        if let Some(b) = &self.bias {
            out.push(NamedTensor {
                name: format!("{prefix}.bias"),
                shape: vec![self.fan_out],
                values: b,
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        let shape = vec![self.fan_out, self.fan_in];
        let fan_out = self.fan_out;
        out.push(NamedTensorMut {
            name: format!("{prefix}.weight"),
            shape,
            values: &mut self.weight,
        });
        if let Some(b) = &mut self.bias {
            out.push(NamedTensorMut {
                name: format!("{prefix}.bias"),
                shape: vec![fan_out],
                values: b,
            });
        }
    }
}

impl<T: Real> Params<T> for Embedding<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.table"),
            shape: vec![self.vocab, self.dim],
            values: &self.table,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        out.push(NamedTensorMut {
            name: format!("{prefix}.table"),
            shape: vec![self.vocab, self.dim],
            values: &mut self.table,
        });
    }
}

impl<T: Real> Params<T> for BlockEmbedding<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.time.collect(&format!("{prefix}.time_proj"), out);
        self.cond.collect(&format!("{prefix}.cond_proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.time.collect_mut(&format!("{prefix}.time_proj"), out);
        self.cond.collect_mut(&format!("{prefix}.cond_proj"), out);
    }
}

macro_rules! params_impl {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<T: Real> Params<T> for $ty<T> {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
                $( self.$field.collect(&format!("{prefix}.{}", $name), out); )*
            }

            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
                $( self.$field.collect_mut(&format!("{prefix}.{}", $name), out); )*
            }
        }
    };
}

params_impl!(BaseNet {
    stem => "stem",
    block1 => "block1",
    down => "down",
    block2 => "block2",
    up => "up",
    block3 => "block3",
    head => "head",
    time_fc1 => "time.fc1",
    time_fc2 => "time.fc2",
    cond_table => "cond",
    emb1 => "block1",
    emb2 => "block2",
    emb3 => "block3",
});

params_impl!(ControlBranch {
    hint => "hint",
    stem => "stem",
    block1 => "block1",
    down => "down",
    block2 => "block2",
    zero0 => "zero0",
    zero1 => "zero1",
});

impl<T: Real> BaseNet<T> {
    fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let (c, w) = (cfg.channels, cfg.width);
        let emb = |ch: usize| BlockEmbedding {
            time: Linear::zeros(EMBED_DIM, ch, true),
            cond: Linear::zeros(EMBED_DIM, ch, false),
        };
        BaseNet {
            stem: Conv2d::kaiming(3, c, w, 1, true, rng),
            block1: Conv2d::kaiming(3, w, w, 1, true, rng),
            down: Conv2d::kaiming(3, w, 2 * w, 2, true, rng),
            block2: Conv2d::kaiming(3, 2 * w, 2 * w, 1, true, rng),
            up: Conv2d::kaiming(3, 2 * w, w, 1, true, rng),
            block3: Conv2d::kaiming(3, w, w, 1, true, rng),
            head: Conv2d::zeros(3, w, c, 1, true),
            time_fc1: Linear::kaiming(EMBED_DIM, EMBED_DIM, true, rng),
            time_fc2: Linear::kaiming(EMBED_DIM, EMBED_DIM, true, rng),
            cond_table: Embedding {
                vocab: cfg.vocab,
                dim: EMBED_DIM,
                table: (0..cfg.vocab * EMBED_DIM).map(|_| T::sample_normal(rng)).collect(),
            },
            emb1: emb(w),
            emb2: emb(2 * w),
            emb3: emb(w),
        }
    }

    fn zeros_like(&self) -> Self {
        let emb = |e: &BlockEmbedding<T>| BlockEmbedding {
            time: e.time.zeros_like(),
            cond: e.cond.zeros_like(),
        };
        BaseNet {
            stem: self.stem.zeros_like(),
            block1: self.block1.zeros_like(),
            down: self.down.zeros_like(),
            block2: self.block2.zeros_like(),
            up: self.up.zeros_like(),
            block3: self.block3.zeros_like(),
            head: self.head.zeros_like(),
            time_fc1: self.time_fc1.zeros_like(),
            time_fc2: self.time_fc2.zeros_like(),
            cond_table: Embedding {
                vocab: self.cond_table.vocab,
                dim: self.cond_table.dim,
                table: vec![T::zero(); self.cond_table.table.len()],
            },
            emb1: emb(&self.emb1),
            emb2: emb(&self.emb2),
            emb3: emb(&self.emb3),
        }
    }
}

impl<T: Real> ControlBranch<T> {
    fn zeros_like(&self) -> Self {
        ControlBranch {
            hint: self.hint.zeros_like(),
            stem: self.stem.zeros_like(),
            block1: self.block1.zeros_like(),
            down: self.down.zeros_like(),
            block2: self.block2.zeros_like(),
            zero0: self.zero0.zeros_like(),
            zero1: self.zero1.zeros_like(),
        }
    }
}

fn band_stream(kind: BandKind) -> u64 {
    kind.key().bytes().fold(0xB4A7_C4u64, |acc, b| seed::derive(acc, &[b as u64]))
}

/// Base denoiser with He-normal convolutions, zero biases and a
/// standard-normal label table. The output convolution and the per-block
/// time and label projections start at zero. Deterministic in `seed`.
pub fn init_params<T: Real>(seed: u64, channels: usize, vocab: usize) -> ModelParams<T> {
    ModelParams::init(
        seed,
        ModelConfig {
            channels,
            vocab,
            ..ModelConfig::default()
        },
    )
}

impl<T: Real> ModelParams<T> {
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = seed::rng(seed, &[0xBA5E]);
        ModelParams {
            config,
            base: BaseNet::init(config, &mut rng),
            branches: BTreeMap::new(),
            progress: TrainingProgress::default(),
        }
    }

    /// Same structure, every value zero.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            base: self.base.zeros_like(),
            branches: self
                .branches
                .iter()
                .map(|(k, b)| (*k, b.zeros_like()))
                .collect(),
            progress: TrainingProgress::default(),
        }
    }

    /// Adds a control branch whose encoder copies the current base weights,
    /// with a He-normal hint convolution and zero injection convolutions.
    pub fn attach_branch(&mut self, kind: BandKind, seed: u64) -> Result<&mut ControlBranch<T>> {
        if self.branches.contains_key(&kind) {
            return Err(Error::Branch(format!("branch `{kind}` is already attached")));
        }
        let mut rng = seed::rng(seed, &[0xB4A7, band_stream(kind)]);
        let (c, w) = (self.config.channels, self.config.width);
        let branch = ControlBranch {
            hint: Conv2d::kaiming(3, c, w, 1, false, &mut rng),
            stem: self.base.stem.clone(),
            block1: self.base.block1.clone(),
            down: self.base.down.clone(),
            block2: self.base.block2.clone(),
            zero0: Conv2d::zeros(1, w, w, 1, true),
            zero1: Conv2d::zeros(1, 2 * w, 2 * w, 1, true),
        };
        self.progress.branch_steps.insert(kind, 0);
        Ok(self.branches.entry(kind).or_insert(branch))
    }

    /// Replaces every all-zero tensor selected by `select` with uniform
    /// values in `[-scale, scale)`. Used to move a fresh model off its
    /// degenerate zero layers in tests.
    pub fn randomize_zero_tensors(&mut self, seed: u64, scale: f64, select: impl Fn(&str) -> bool) {
        let mut rng = seed::rng(seed, &[0x2E50]);
        for t in self.named_tensors_mut() {
            if select(&t.name) && t.values.iter().all(|v| *v == T::zero()) {
                for v in t.values.iter_mut() {
                    *v = T::lit(scale * (2.0 * rng.random::<f64>() - 1.0));
                }
            }
        }
    }

    pub fn branch(&self, kind: BandKind) -> Result<&ControlBranch<T>> {
        self.branches
            .get(&kind)
            .ok_or_else(|| Error::Branch(format!("branch `{kind}` is not attached")))
    }

    /// Every parameter tensor in a fixed order: base first, then branches
    /// in band order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        self.base.collect("base", &mut out);
        for (kind, branch) in &self.branches {
            branch.collect(&format!("branch.{}", kind.key()), &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut out = Vec::new();
        self.base.collect_mut("base", &mut out);
        for (kind, branch) in &mut self.branches {
            branch.collect_mut(&format!("branch.{}", kind.key()), &mut out);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|t| t.values.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            config: self.config,
            base: BaseNet::init(self.config, &mut seed::rng(0, &[])),
            branches: BTreeMap::new(),
            progress: self.progress.clone(),
        };
        for &kind in self.branches.keys() {
            out.attach_branch(kind, 0).expect("fresh map");
        }
        out.progress = self.progress.clone();
        let src = self.named_tensors();
        for (dst, src) in out.named_tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.values.iter_mut().zip(src.values) {
                *d = U::lit(s.to_f64().unwrap_or(f64::NAN));
            }
        }
        out
    }

    fn check_inputs(&self, z_t: &SpatialTensor<T>, cond: usize) -> Result<()> {
        let s = z_t.shape();
        if s.c != self.config.channels || s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape(
                format!("even h x even w x {}", self.config.channels),
                s,
            ));
        }
        if cond >= self.config.vocab {
            return Err(Error::InvalidArgument(format!(
                "label {cond} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        z_t.ensure_finite()
    }
}

/// Shared conditioning activations for one `(t, label)` pair.
struct Embeds<T> {
    temb: Vec<T>,
    pre1: Vec<T>,
    act1: Vec<T>,
    time_out: Vec<T>,
    time_act: Vec<T>,
    cond: usize,
    biases: [Vec<T>; 3],
}

impl<T: Real> BaseNet<T> {
    fn embeds(&self, t: usize, cond: usize) -> Embeds<T> {
        let temb = time_embed::<T>(t).0;
        let pre1 = self.time_fc1.forward(&temb);
        let mut act1 = pre1.clone();
        nn::relu_in_place(&mut act1);
        let time_out = self.time_fc2.forward(&act1);
        let mut time_act = time_out.clone();
        nn::relu_in_place(&mut time_act);
        let label = self.cond_table.row(cond);
        let bias = |e: &BlockEmbedding<T>| {
            let mut b = e.time.forward(&time_act);
            e.cond.forward_into(label, &mut b);
            b
        };
        let biases = [bias(&self.emb1), bias(&self.emb2), bias(&self.emb3)];
        Embeds {
            temb,
            pre1,
            act1,
            time_out,
            time_act,
            cond,
            biases,
        }
    }

    fn embeds_backward(&self, e: &Embeds<T>, d_biases: [&[T]; 3], g: &mut BaseNet<T>) {
        let mut d_time_act = vec![T::zero(); EMBED_DIM];
        let mut d_label = vec![T::zero(); EMBED_DIM];
        let label = self.cond_table.row(e.cond);
        for ((emb, gemb), d) in [&self.emb1, &self.emb2, &self.emb3]
            .into_iter()
            .zip([&mut g.emb1, &mut g.emb2, &mut g.emb3])
            .zip(d_biases)
        {
            emb.time.backward(&e.time_act, d, Some(&mut gemb.time), Some(&mut d_time_act));
            emb.cond.backward(label, d, Some(&mut gemb.cond), Some(&mut d_label));
        }
        relu_backward(&e.time_out, &mut d_time_act);
        let mut d_act1 = vec![T::zero(); EMBED_DIM];
        self.time_fc2
            .backward(&e.act1, &d_time_act, Some(&mut g.time_fc2), Some(&mut d_act1));
        relu_backward(&e.pre1, &mut d_act1);
        self.time_fc1.backward(&e.temb, &d_act1, Some(&mut g.time_fc1), None);
        let row = &mut g.cond_table.table[e.cond * EMBED_DIM..(e.cond + 1) * EMBED_DIM];
        for (r, d) in row.iter_mut().zip(d_label) {
            *r += d;
        }
    }
}

/// Conv followed by per-channel embedding bias; returns pre-activation.
fn conv_block<T: Real>(conv: &Conv2d<T>, x: &SpatialTensor<T>, bias: &[T]) -> (SpatialTensor<T>, Vec<T>) {
    let (mut pre, cols) = conv.forward(x);
    nn::add_channel_bias(pre.data_mut(), bias);
    (pre, cols)
}

fn relu_of<T: Real>(pre: &SpatialTensor<T>) -> SpatialTensor<T> {
    let mut out = pre.clone();
    nn::relu_in_place(out.data_mut());
    out
}

fn add_assign<T: Real>(x: &mut SpatialTensor<T>, y: &SpatialTensor<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

struct BranchTape<T> {
    stem_cols: Vec<T>,
    hint_cols: Vec<T>,
    block1_cols: Vec<T>,
    pre1: SpatialTensor<T>,
    h1: SpatialTensor<T>,
    down_cols: Vec<T>,
    down_out: Shape,
    block2_cols: Vec<T>,
    pre2: SpatialTensor<T>,
    h2: SpatialTensor<T>,
    zero0_cols: Vec<T>,
    zero1_cols: Vec<T>,
}

struct BaseTape<T> {
    stem_cols: Vec<T>,
    stem_out: Shape,
    block1_cols: Vec<T>,
    pre1: SpatialTensor<T>,
    h1: Shape,
    down_cols: Vec<T>,
    down_out: Shape,
    block2_cols: Vec<T>,
    pre2: SpatialTensor<T>,
    h2: Shape,
    up_in: Shape,
    up_cols: Vec<T>,
    block3_in: Shape,
    block3_cols: Vec<T>,
    pre3: SpatialTensor<T>,
    head_in: Shape,
    head_cols: Vec<T>,
}

/// Injection deltas added to the base `h1` and `h2`.
pub struct Injections<T> {
    pub full_res: SpatialTensor<T>,
    pub half_res: SpatialTensor<T>,
}

fn branch_forward<T: Real>(
    b: &ControlBranch<T>,
    x: &SpatialTensor<T>,
    control: &SpatialTensor<T>,
    e: &Embeds<T>,
) -> (Injections<T>, BranchTape<T>) {
    let (mut s, stem_cols) = b.stem.forward(x);
    let (hint, hint_cols) = b.hint.forward(control);
    add_assign(&mut s, &hint);
    let (pre1, block1_cols) = conv_block(&b.block1, &s, &e.biases[0]);
    let h1 = relu_of(&pre1);
    let (d, down_cols) = b.down.forward(&h1);
    let (pre2, block2_cols) = conv_block(&b.block2, &d, &e.biases[1]);
    let h2 = relu_of(&pre2);
    let (full_res, zero0_cols) = b.zero0.forward(&h1);
    let (half_res, zero1_cols) = b.zero1.forward(&h2);
    (
        Injections { full_res, half_res },
        BranchTape {
            stem_cols,
            hint_cols,
            block1_cols,
            pre1,
            h1,
            down_cols,
            down_out: d.shape(),
            block2_cols,
            pre2,
            h2,
            zero0_cols,
            zero1_cols,
        },
    )
}

fn base_forward<T: Real>(
    p: &BaseNet<T>,
    x: &SpatialTensor<T>,
    e: &Embeds<T>,
    inject: Option<&Injections<T>>,
) -> (SpatialTensor<T>, BaseTape<T>) {
    let (s, stem_cols) = p.stem.forward(x);
    let (pre1, block1_cols) = conv_block(&p.block1, &s, &e.biases[0]);
    let mut h1 = relu_of(&pre1);
    if let Some(inj) = inject {
        add_assign(&mut h1, &inj.full_res);
    }
    let (d, down_cols) = p.down.forward(&h1);
    let (pre2, block2_cols) = conv_block(&p.block2, &d, &e.biases[1]);
    let mut h2 = relu_of(&pre2);
    if let Some(inj) = inject {
        add_assign(&mut h2, &inj.half_res);
    }
    let up_in = upsample2x(&h2);
    let (mut u, up_cols) = p.up.forward(&up_in);
    add_assign(&mut u, &h1);
    let (pre3, block3_cols) = conv_block(&p.block3, &u, &e.biases[2]);
    let h3 = relu_of(&pre3);
    let (out, head_cols) = p.head.forward(&h3);
    (
        out,
        BaseTape {
            stem_cols,
            stem_out: s.shape(),
            block1_cols,
            pre1,
            h1: h1.shape(),
            down_cols,
            down_out: d.shape(),
            block2_cols,
            pre2,
            h2: h2.shape(),
            up_in: up_in.shape(),
            up_cols,
            block3_in: u.shape(),
            block3_cols,
            pre3,
            head_in: h3.shape(),
            head_cols,
        },
    )
}

/// Gradients flowing into the two injection points.
struct InjectionGrads<T> {
    full_res: SpatialTensor<T>,
    half_res: SpatialTensor<T>,
}

/// Backpropagates `d_out` through the base net. Parameter gradients are
/// accumulated only when `grad` is given.
fn base_backward<T: Real>(
    p: &BaseNet<T>,
    tape: &BaseTape<T>,
    x_shape: Shape,
    e: &Embeds<T>,
    d_out: &SpatialTensor<T>,
    mut grad: Option<&mut BaseNet<T>>,
) -> InjectionGrads<T> {
    let d_h3 = p
        .head
        .backward(&tape.head_cols, tape.head_in, d_out, grad.as_deref_mut().map(|g| &mut g.head), true)
        .expect("input grad");
    let mut d_pre3 = d_h3;
    relu_backward(tape.pre3.data(), d_pre3.data_mut());
    let d_u = p
        .block3
        .backward(&tape.block3_cols, tape.block3_in, &d_pre3, grad.as_deref_mut().map(|g| &mut g.block3), true)
        .expect("input grad");
    let mut d_h1 = d_u.clone();
    let d_up_in = p
        .up
        .backward(&tape.up_cols, tape.up_in, &d_u, grad.as_deref_mut().map(|g| &mut g.up), true)
        .expect("input grad");
    let d_h2 = upsample2x_backward(&d_up_in);
    debug_assert_eq!(d_h2.shape(), tape.h2);
    let mut d_pre2 = d_h2.clone();
    relu_backward(tape.pre2.data(), d_pre2.data_mut());
    let d_d = p
        .block2
        .backward(&tape.block2_cols, tape.down_out, &d_pre2, grad.as_deref_mut().map(|g| &mut g.block2), true)
        .expect("input grad");
    let d_from_down = p
        .down
        .backward(&tape.down_cols, tape.h1, &d_d, grad.as_deref_mut().map(|g| &mut g.down), true)
        .expect("input grad");
    add_assign(&mut d_h1, &d_from_down);
    let mut d_pre1 = d_h1.clone();
    relu_backward(tape.pre1.data(), d_pre1.data_mut());

    if let Some(g) = grad {
        let d_s = p
            .block1
            .backward(&tape.block1_cols, tape.stem_out, &d_pre1, Some(&mut g.block1), true)
            .expect("input grad");
        p.stem.backward(&tape.stem_cols, x_shape, &d_s, Some(&mut g.stem), false);
        let sums = |d: &SpatialTensor<T>| {
            let mut s = vec![T::zero(); d.c()];
            nn::channel_sums(d.data(), &mut s);
            s
        };
        let (b1, b2, b3) = (sums(&d_pre1), sums(&d_pre2), sums(&d_pre3));
        p.embeds_backward(e, [&b1, &b2, &b3], g);
    }
    InjectionGrads {
        full_res: d_h1,
        half_res: d_h2,
    }
}

fn branch_backward<T: Real>(
    b: &ControlBranch<T>,
    tape: &BranchTape<T>,
    x_shape: Shape,
    d: &InjectionGrads<T>,
    g: &mut ControlBranch<T>,
) {
    let mut d_h2 = b
        .zero1
        .backward(&tape.zero1_cols, tape.h2.shape(), &d.half_res, Some(&mut g.zero1), true)
        .expect("input grad");
    relu_backward(tape.pre2.data(), d_h2.data_mut());
    let d_d = b
        .block2
        .backward(&tape.block2_cols, tape.down_out, &d_h2, Some(&mut g.block2), true)
        .expect("input grad");
    let mut d_h1 = b
        .down
        .backward(&tape.down_cols, tape.h1.shape(), &d_d, Some(&mut g.down), true)
        .expect("input grad");
    let d_zero0 = b
        .zero0
        .backward(&tape.zero0_cols, tape.h1.shape(), &d.full_res, Some(&mut g.zero0), true)
        .expect("input grad");
    add_assign(&mut d_h1, &d_zero0);
    relu_backward(tape.pre1.data(), d_h1.data_mut());
    let stem_out = tape.pre1.shape();
    let stem_shape = Shape {
        c: b.block1.cin,
        ..stem_out
    };
    let d_s = b
        .block1
        .backward(&tape.block1_cols, stem_shape, &d_h1, Some(&mut g.block1), true)
        .expect("input grad");
    b.stem.backward(&tape.stem_cols, x_shape, &d_s, Some(&mut g.stem), false);
    b.hint.backward(&tape.hint_cols, x_shape, &d_s, Some(&mut g.hint), false);
}

/// Base noise prediction `eps_theta(z_t, t, label)`.
pub fn forward_base<T: Real>(
    p: &ModelParams<T>,
    z_t: &SpatialTensor<T>,
    t: usize,
    cond: usize,
) -> Result<SpatialTensor<T>> {
    p.check_inputs(z_t, cond)?;
    let e = p.base.embeds(t, cond);
    Ok(base_forward(&p.base, z_t, &e, None).0)
}

/// Branch features after the zero convolutions, before they are added to
/// the base activations.
pub fn injections<T: Real>(
    p: &ModelParams<T>,
    branch: BandKind,
    z_t: &SpatialTensor<T>,
    t: usize,
    cond: usize,
    control: &SpatialTensor<T>,
) -> Result<Injections<T>> {
    p.check_inputs(z_t, cond)?;
    control.ensure_shape(z_t.shape())?;
    let b = p.branch(branch)?;
    let e = p.base.embeds(t, cond);
    Ok(branch_forward(b, z_t, control, &e).0)
}

/// Noise prediction steered by `branch` with control signal `control`.
pub fn forward_controlled<T: Real>(
    p: &ModelParams<T>,
    branch: BandKind,
    z_t: &SpatialTensor<T>,
    t: usize,
    cond: usize,
    control: &SpatialTensor<T>,
) -> Result<SpatialTensor<T>> {
    p.check_inputs(z_t, cond)?;
    let b = p.branch(branch)?;
    control.ensure_shape(z_t.shape())?;
    control.ensure_finite()?;
    let e = p.base.embeds(t, cond);
    let (inj, _) = branch_forward(b, z_t, control, &e);
    Ok(base_forward(&p.base, z_t, &e, Some(&inj)).0)
}

/// One regression example: clean latent, label, timestep and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub z0: SpatialTensor<T>,
    pub cond: usize,
    pub t: usize,
    pub eps: SpatialTensor<T>,
}

/// Branch under training together with its band mask.
#[derive(Debug, Clone, Copy)]
pub struct BranchTarget<'a> {
    pub kind: BandKind,
    pub mask: &'a BandMask,
}

/// Mean squared noise-prediction error over the batch and its exact
/// gradient.
///
/// Without a branch the base group is trainable; with a branch only that
/// branch is, the control signal being `ffm(z0, mask)` per sample. Frozen
/// parameters get zero gradient. Per-sample contributions are accumulated
/// in batch order.
pub fn loss_and_grads<T: Real>(
    p: &ModelParams<T>,
    branch: Option<BranchTarget<'_>>,
    batch: &[Sample<T>],
    sched: &NoiseSchedule,
) -> Result<(T, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut grads = p.zeros_like();
    let per_sample = batch[0].z0.shape().len();
    let scale = T::lit(2.0 / (batch.len() * per_sample) as f64);
    let mut total = T::zero();
    for sample in batch {
        p.check_inputs(&sample.z0, sample.cond)?;
        sample.eps.ensure_shape(sample.z0.shape())?;
        if sample.z0.shape().len() != per_sample {
            return Err(Error::shape(batch[0].z0.shape(), sample.z0.shape()));
        }
        let z_t = q_sample(&sample.z0, sample.t, &sample.eps, sched)?;
        let e = p.base.embeds(sample.t, sample.cond);
        let (out, d_out) = match branch {
            None => {
                let (out, tape) = base_forward(&p.base, &z_t, &e, None);
                let d_out = out.zip_map(&sample.eps, |a, b| (a - b) * scale)?;
                base_backward(&p.base, &tape, z_t.shape(), &e, &d_out, Some(&mut grads.base));
                (out, d_out)
            }
            Some(target) => {
                let b = p.branch(target.kind)?;
                let control = ffm(&sample.z0, target.mask, None)?;
                let (inj, btape) = branch_forward(b, &z_t, &control, &e);
                let (out, tape) = base_forward(&p.base, &z_t, &e, Some(&inj));
                let d_out = out.zip_map(&sample.eps, |a, b| (a - b) * scale)?;
                let d_inj = base_backward(&p.base, &tape, z_t.shape(), &e, &d_out, None);
                let g = grads.branches.get_mut(&target.kind).expect("same structure");
                branch_backward(b, &btape, z_t.shape(), &d_inj, g);
                (out, d_out)
            }
        };
        drop(d_out);
        total += out
            .data()
            .iter()
            .zip(sample.eps.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    }
    let loss = total / T::lit((batch.len() * per_sample) as f64);
    Ok((loss, grads))
}

/// Batch loss without gradients, plus the signs of every ReLU
/// pre-activation in a fixed order. Two parameter settings with equal
/// signatures lie in the same piecewise-linear region.
/// Batch loss without gradients; with `branch`, the control signal is the
/// band-filtered clean latent as in training.
pub fn denoising_loss<T: Real>(
    p: &ModelParams<T>,
    branch: Option<BandKind>,
    batch: &[Sample<T>],
    sched: &NoiseSchedule,
) -> Result<T> {
    let Some(first) = batch.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let mask = match branch {
        Some(kind) => Some(make_mask(kind, first.z0.h(), first.z0.w())?),
        None => None,
    };
    let target = match (branch, &mask) {
        (Some(kind), Some(mask)) => Some(BranchTarget { kind, mask }),
        _ => None,
    };
    Ok(loss_and_signature(p, target, batch, sched)?.0)
}

pub(crate) fn loss_and_signature<T: Real>(
    p: &ModelParams<T>,
    branch: Option<BranchTarget<'_>>,
    batch: &[Sample<T>],
    sched: &NoiseSchedule,
) -> Result<(T, Vec<bool>)> {
    let mut sig = Vec::new();
    let mut total = T::zero();
    let mut push = |xs: &[T]| sig.extend(xs.iter().map(|&v| v > T::zero()));
    for sample in batch {
        p.check_inputs(&sample.z0, sample.cond)?;
        let z_t = q_sample(&sample.z0, sample.t, &sample.eps, sched)?;
        let e = p.base.embeds(sample.t, sample.cond);
        push(&e.pre1);
        push(&e.time_out);
        let inj = match branch {
            Some(target) => {
                let control = ffm(&sample.z0, target.mask, None)?;
                let (inj, tape) = branch_forward(p.branch(target.kind)?, &z_t, &control, &e);
                push(tape.pre1.data());
                push(tape.pre2.data());
                Some(inj)
            }
            None => None,
        };
        let (out, tape) = base_forward(&p.base, &z_t, &e, inj.as_ref());
        push(tape.pre1.data());
        push(tape.pre2.data());
        push(tape.pre3.data());
        total += out
            .data()
            .iter()
            .zip(sample.eps.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    }
    let n = batch.len() * batch.first().map_or(0, |s| s.z0.shape().len());
    Ok((total / T::lit(n as f64), sig))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 3,
            vocab: 4,
            width: 4,
        }
    }

    fn randn<T: Real>(shape: Shape, seed: u64) -> SpatialTensor<T> {
        SpatialTensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embed::<f64>(0).0;
        assert!(e0[..16].iter().all(|&v| v == 0.0));
        assert!(e0[16..].iter().all(|&v| v == 1.0));
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| time_embed::<f64>(t).0).collect();
        for v in &all {
            assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                assert_ne!(all[a], all[b]);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_injections() {
        let a = init_params::<f32>(7, 12, 16);
        let b = init_params::<f32>(7, 12, 16);
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(8, 12, 16));
        let mut p = a;
        p.attach_branch(BandKind::Low, 1).unwrap();
        let br = p.branch(BandKind::Low).unwrap();
        let zero_sum: f32 = [&br.zero0, &br.zero1]
            .iter()
            .flat_map(|z| z.kernel.iter().chain(z.bias.as_ref().unwrap()))
            .map(|v| v.abs())
            .sum();
        assert_eq!(zero_sum, 0.0);
        assert_eq!(br.stem, p.base.stem);
        assert_eq!(br.block2, p.base.block2);
        assert!(matches!(p.attach_branch(BandKind::Low, 1), Err(Error::Branch(_))));
    }

    #[test]
    fn tensor_names_are_stable() {
        let mut p = init_params::<f32>(0, 12, 16);
        p.attach_branch(BandKind::Low, 0).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|t| t.name).collect();
        assert!(names.contains(&"base.stem.kernel".to_string()));
        assert!(names.contains(&"base.cond.table".to_string()));
        assert!(names.contains(&"base.block2.time_proj.weight".to_string()));
        assert!(names.contains(&"branch.low.zero0.kernel".to_string()));
        assert!(names.contains(&"branch.low.hint.kernel".to_string()));
        assert!(!names.contains(&"branch.low.hint.bias".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(Trainable::Branch(BandKind::Low).owns("branch.low.zero0.kernel"));
        assert!(!Trainable::Branch(BandKind::Low).owns("branch.lower.zero0.kernel"));
        assert!(!Trainable::Base.owns("branch.low.zero0.kernel"));
    }

    #[test]
    fn zero_weights_predict_zero() {
        let p = init_params::<f32>(0, 12, 16).zeros_like();
        let z = randn::<f32>(Shape::new(16, 16, 12).unwrap(), 1);
        let out = forward_base(&p, &z, 500, 3).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_validation() {
        let mut p = init_params::<f32>(0, 12, 16);
        let odd = randn::<f32>(Shape::new(15, 16, 12).unwrap(), 1);
        assert!(matches!(forward_base(&p, &odd, 5, 0), Err(Error::Shape { .. })));
        let z = randn::<f32>(Shape::new(16, 16, 12).unwrap(), 1);
        assert!(matches!(forward_base(&p, &z, 5, 16), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            forward_controlled(&p, BandKind::Low, &z, 5, 0, &z),
            Err(Error::Branch(_))
        ));
        p.attach_branch(BandKind::Low, 0).unwrap();
        let small = randn::<f32>(Shape::new(8, 8, 12).unwrap(), 1);
        assert!(matches!(
            forward_controlled(&p, BandKind::Low, &z, 5, 0, &small),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn fresh_branch_is_invisible() {
        let mut p = init_params::<f32>(3, 12, 16);
        p.randomize_zero_tensors(4, 0.1, |n| n.starts_with("base."));
        p.attach_branch(BandKind::Mini, 9).unwrap();
        let shape = Shape::new(16, 16, 12).unwrap();
        for k in 0..5 {
            let z = randn::<f32>(shape, 10 + k);
            let c = randn::<f32>(shape, 20 + k);
            let t = 1 + 199 * k as usize;
            let base = forward_base(&p, &z, t, k as usize).unwrap();
            let ctl = forward_controlled(&p, BandKind::Mini, &z, t, k as usize, &c).unwrap();
            assert_eq!(base, ctl);
        }
    }

    #[test]
    fn injections_scale_with_zero_kernels() {
        let mut p = init_params::<f64>(3, 3, 4);
        p.attach_branch(BandKind::Low, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let br = p.branches.get_mut(&BandKind::Low).unwrap();
        for z in [&mut br.zero0, &mut br.zero1] {
            z.kernel.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        let shape = Shape::new(8, 8, 3).unwrap();
        let z = randn::<f64>(shape, 1);
        let c = randn::<f64>(shape, 2);
        let once = injections(&p, BandKind::Low, &z, 40, 1, &c).unwrap();
        let br = p.branches.get_mut(&BandKind::Low).unwrap();
        for z in [&mut br.zero0, &mut br.zero1] {
            z.kernel.iter_mut().for_each(|v| *v *= 2.0);
        }
        let twice = injections(&p, BandKind::Low, &z, 40, 1, &c).unwrap();
        assert!(twice.full_res.max_abs_diff(&once.full_res.scale(2.0)) < 1e-12);
        assert!(twice.half_res.max_abs_diff(&once.half_res.scale(2.0)) < 1e-12);
        assert!(once.full_res.energy() > 0.0);
    }

    fn batch<T: Real>(shape: Shape, n: usize, seed: u64, vocab: usize) -> Vec<Sample<T>> {
        (0..n)
            .map(|i| Sample {
                z0: randn(shape, seed + 3 * i as u64),
                cond: i % vocab,
                t: 1 + (i * 337) % 1000,
                eps: randn(shape, seed + 3 * i as u64 + 1),
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_grads() {
        let p = init_params::<f64>(0, 3, 4).zeros_like();
        let shape = Shape::new(8, 8, 3).unwrap();
        let mut b = batch::<f64>(shape, 3, 1, 4);
        for s in &mut b {
            s.eps = SpatialTensor::zeros(shape);
        }
        let (loss, grads) = loss_and_grads(&p, None, &b, &NoiseSchedule::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.named_tensors().iter().all(|t| t.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let p = ModelParams::<f64>::init(2, small_config());
        let shape = Shape::new(8, 8, 3).unwrap();
        let sched = NoiseSchedule::default();
        let b = batch::<f64>(shape, 3, 4, 4);
        let doubled: Vec<_> = b.iter().chain(b.iter()).cloned().collect();
        let (l1, g1) = loss_and_grads(&p, None, &b, &sched).unwrap();
        let (l2, g2) = loss_and_grads(&p, None, &doubled, &sched).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.named_tensors().iter().zip(g2.named_tensors()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
            }
        }
        assert!(loss_and_grads(&p, None, &[], &sched).is_err());
    }

    #[test]
    fn branch_training_isolates_gradients() {
        let mut p = ModelParams::<f64>::init(2, small_config());
        p.randomize_zero_tensors(1, 0.1, |n| !n.ends_with(".bias"));
        p.attach_branch(BandKind::Low, 0).unwrap();
        p.attach_branch(BandKind::Mid, 0).unwrap();
        let shape = Shape::new(8, 8, 3).unwrap();
        let mask = make_mask(BandKind::Low, 8, 8).unwrap();
        let b = batch::<f64>(shape, 2, 9, 4);
        let target = BranchTarget {
            kind: BandKind::Low,
            mask: &mask,
        };
        let (_, grads) = loss_and_grads(&p, Some(target), &b, &NoiseSchedule::default()).unwrap();
        let owner = Trainable::Branch(BandKind::Low);
        let mut nonzero = 0;
        for t in grads.named_tensors() {
            if owner.owns(&t.name) {
                nonzero += t.values.iter().any(|&v| v != 0.0) as usize;
            } else {
                assert!(t.values.iter().all(|&v| v == 0.0), "{}", t.name);
            }
        }
        // Only the zero convolutions receive signal while they are zero.
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn cast_round_trip() {
        let mut p = init_params::<f32>(4, 12, 16);
        p.attach_branch(BandKind::High, 2).unwrap();
        p.progress.base_steps = 5;
        let back = p.cast::<f64>().cast::<f32>();
        assert_eq!(back, p);
    }
}
