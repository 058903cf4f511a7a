//! Two-stage training (base denoiser, then frozen-base control branches),
//! image translation and paired evaluation.

use std::fmt;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control_net::{loss_and_grads, BranchTarget, ModelConfig, ModelParams, Sample, Trainable};
use crate::data::{self, DatasetSpec, Image, Palette, ShapeKind};
use crate::diffusion::{ddim_sample, make_schedule, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::filters::{band_consistency, ffm_with, make_mask, BandKind, ShuffleOptions};
use crate::seed;
use crate::tensor::{Shape, SpatialTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Branch(BandKind),
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Pretrain => 0x7E_0000,
            Stage::Branch(kind) => kind
                .key()
                .bytes()
                .fold(0x7E_0001, |acc, b| seed::derive(acc, &[b as u64])),
        }
    }

    fn group(self) -> Trainable {
        match self {
            Stage::Pretrain => Trainable::Base,
            Stage::Branch(kind) => Trainable::Branch(kind),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Pretrain => f.write_str("pretrain"),
            Stage::Branch(kind) => write!(f, "branch {kind}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: crate::diffusion::DEFAULT_TIMESTEPS,
            beta_min: crate::diffusion::DEFAULT_BETA_MIN,
            beta_max: crate::diffusion::DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Feature width of a freshly initialized base; ignored for branches.
    pub width: usize,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            schedule: ScheduleConfig::default(),
            width: ModelConfig::default().width,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::InvalidArgument("adam moments must lie in [0, 1), eps > 0".into()));
        }
        if self.width == 0 {
            return Err(Error::InvalidArgument("width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    /// One loss per step, in order.
    pub losses: Vec<f32>,
    pub wall_time: Duration,
    /// Filled in by callers that persist the result.
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f32 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f32 {
        *self.losses.last().expect("at least one step")
    }

    /// Mean of the first and last `window` losses.
    pub fn window_means(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len());
        let mean = |xs: &[f32]| xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..]))
    }

    /// `step<TAB>loss` lines, steps counted from 1.
    pub fn loss_log(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}\t{l}\n", i + 1))
            .collect()
    }
}

/// Adam with bias correction over one parameter group.
pub struct Adam {
    cfg: AdamConfig,
    group: Trainable,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, group: Trainable, p: &ModelParams<f32>) -> Self {
        let moments = p
            .named_tensors()
            .iter()
            .map(|t| {
                if group.owns(&t.name) {
                    (vec![0.0; t.values.len()], vec![0.0; t.values.len()])
                } else {
                    (Vec::new(), Vec::new())
                }
            })
            .collect();
        Adam {
            cfg,
            group,
            step: 0,
            moments,
        }
    }

    /// Updates every tensor of the group; everything else is untouched.
    pub fn update(&mut self, p: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = (1.0 - c.beta1.powi(self.step as i32)) as f32;
        let bc2 = (1.0 - c.beta2.powi(self.step as i32)) as f32;
        let (lr, eps) = (c.lr as f32, c.eps as f32);
        let grads = grads.named_tensors();
        for ((t, g), (m, v)) in p.named_tensors_mut().into_iter().zip(grads).zip(&mut self.moments) {
            if !self.group.owns(&t.name) {
                continue;
            }
            debug_assert_eq!(t.name, g.name);
            for i in 0..t.values.len() {
                let gi = g.values[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Encoded training examples: latent and token.
pub type Dataset = [(SpatialTensor<f32>, usize)];

fn check_dataset(dataset: &Dataset, p: &ModelParams<f32>) -> Result<Shape> {
    let Some((first, _)) = dataset.first() else {
        return Err(Error::Data("empty dataset".into()));
    };
    let shape = first.shape();
    for (i, (z, tok)) in dataset.iter().enumerate() {
        if z.shape() != shape {
            return Err(Error::Data(format!("example {i} has shape {}, expected {shape}", z.shape())));
        }
        if *tok >= p.config.vocab {
            return Err(Error::Data(format!("example {i} has token {tok} outside vocabulary")));
        }
    }
    if shape.c != p.config.channels {
        return Err(Error::Data(format!(
            "latents have {} channels, model expects {}",
            shape.c, p.config.channels
        )));
    }
    Ok(shape)
}

fn run(cfg: &TrainConfig, mut p: ModelParams<f32>, dataset: &Dataset) -> Result<(ModelParams<f32>, TrainReport)> {
    let started = Instant::now();
    let shape = check_dataset(dataset, &p)?;
    let sched = cfg.schedule.build()?;
    let mask = match cfg.stage {
        Stage::Branch(kind) => Some(make_mask(kind, shape.h, shape.w)?),
        Stage::Pretrain => None,
    };
    let target = match (cfg.stage, &mask) {
        (Stage::Branch(kind), Some(mask)) => Some(BranchTarget { kind, mask }),
        _ => None,
    };
    let done = match cfg.stage {
        Stage::Pretrain => p.progress.base_steps,
        Stage::Branch(kind) => p.progress.branch_steps.get(&kind).copied().unwrap_or(0),
    };
    let mut adam = Adam::new(cfg.adam, cfg.stage.group(), &p);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let global = done + step as u64;
        let batch_seed = seed::derive(cfg.seed, &[cfg.stage.stream(), global]);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let batch: Vec<Sample<f32>> = (0..cfg.batch_size)
            .map(|_| {
                let (z0, cond) = &dataset[rng.random_range(0..dataset.len())];
                Sample {
                    z0: z0.clone(),
                    cond: *cond,
                    t: rng.random_range(1..=sched.timesteps()),
                    eps: SpatialTensor::randn(shape, &mut rng),
                }
            })
            .collect();
        let (loss, grads) = loss_and_grads(&p, target, &batch, &sched)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_seed,
                loss: loss as f64,
            });
        }
        adam.update(&mut p, &grads);
        losses.push(loss);
    }
    match cfg.stage {
        Stage::Pretrain => p.progress.base_steps += cfg.steps as u64,
        Stage::Branch(kind) => *p.progress.branch_steps.entry(kind).or_insert(0) += cfg.steps as u64,
    }
    Ok((
        p,
        TrainReport {
            stage: cfg.stage,
            losses,
            wall_time: started.elapsed(),
            checkpoint: None,
        },
    ))
}

/// Trains a freshly initialized base denoiser.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset) -> Result<(ModelParams<f32>, TrainReport)> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::InvalidArgument(format!("pretrain called with stage `{}`", cfg.stage)));
    }
    cfg.validate()?;
    let channels = dataset
        .first()
        .map(|(z, _)| z.c())
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    let model = ModelConfig {
        channels,
        vocab: data::VOCAB,
        width: cfg.width,
    };
    run(cfg, ModelParams::init(cfg.seed, model), dataset)
}

/// Trains one branch on top of a pretrained, frozen base. The branch is
/// attached first when missing and resumed otherwise.
pub fn train_branch(
    cfg: &TrainConfig,
    base: &ModelParams<f32>,
    dataset: &Dataset,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let Stage::Branch(kind) = cfg.stage else {
        return Err(Error::InvalidArgument("train_branch needs a branch stage".into()));
    };
    cfg.validate()?;
    if base.progress.base_steps == 0 {
        return Err(Error::State("base model has not been pretrained".into()));
    }
    let mut p = base.clone();
    if !p.branches.contains_key(&kind) {
        p.attach_branch(kind, cfg.seed)?;
    }
    run(cfg, p, dataset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslateOptions {
    /// Equifrequency-shuffle the control spectrum before use.
    pub shuffle: bool,
    /// Permit shuffling on branches other than mini.
    pub allow_shuffle_any_band: bool,
    pub shuffle_shared_channels: bool,
    pub sampler: SamplerConfig,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        TranslateOptions {
            shuffle: false,
            allow_shuffle_any_band: false,
            shuffle_shared_channels: false,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Control signal for `source` through `branch`'s band.
pub fn control_signal(
    z0: &SpatialTensor<f32>,
    branch: BandKind,
    opts: &TranslateOptions,
    seed: u64,
) -> Result<SpatialTensor<f32>> {
    if opts.shuffle && branch != BandKind::Mini && !opts.allow_shuffle_any_band {
        return Err(Error::InvalidArgument(format!(
            "shuffle is only defined for the mini branch, not `{branch}`"
        )));
    }
    let mask = make_mask(branch, z0.h(), z0.w())?;
    let shuffle = opts.shuffle.then(|| ShuffleOptions {
        seed: seed::derive(seed, &[0x5F]),
        shared_channels: opts.shuffle_shared_channels,
    });
    ffm_with(z0, &mask, shuffle)
}

/// Samples an image for `target` steered by `source` through `branch`.
pub fn translate(
    p: &ModelParams<f32>,
    sched: &NoiseSchedule,
    source: &Image,
    target: usize,
    branch: BandKind,
    opts: &TranslateOptions,
    seed: u64,
) -> Result<Image> {
    let z0 = data::encode::<f32>(source)?;
    p.branch(branch)?;
    let control = control_signal(&z0, branch, opts, seed)?;
    let z = ddim_sample(p, z0.shape(), target, Some((branch, &control)), &opts.sampler, sched, seed)?;
    data::decode(&z)
}

/// Base-model sample for `target` with the same noise stream as
/// [`translate`] at equal `seed`.
pub fn sample_uncontrolled(
    p: &ModelParams<f32>,
    sched: &NoiseSchedule,
    size: usize,
    target: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Image> {
    let shape = Shape::new(size / 2, size / 2, p.config.channels)?;
    let z = ddim_sample(p, shape, target, None, sampler, sched, seed)?;
    data::decode(&z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MetricSummary { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Latent band consistency between two images.
pub fn image_band_consistency(source: &Image, output: &Image, kind: BandKind) -> Result<f64> {
    let a = data::encode::<f64>(source)?;
    let b = data::encode::<f64>(output)?;
    band_consistency(&a, &b, &make_mask(kind, a.h(), a.w())?)
}

/// Euclidean distance between mean colors.
pub fn mean_color_distance(a: &Image, b: &Image) -> f64 {
    let (ma, mb) = (a.mean_color(), b.mean_color());
    (0..3).map(|i| (ma[i] - mb[i]).powi(2)).sum::<f64>().sqrt()
}

/// Pearson correlation of pixel values after removing each color
/// channel's mean.
pub fn pixel_correlation(a: &Image, b: &Image) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    let (ma, mb) = (a.mean_color(), b.mean_color());
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (i, (&x, &y)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        let (x, y) = (x as f64 - ma[i % 3], y as f64 - mb[i % 3]);
        xy += x * y;
        xx += x * x;
        yy += y * y;
    }
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok(xy / (xx * yy).sqrt())
}

/// Palette whose gradient midpoint is nearest to the image's mean color.
pub fn nearest_palette(img: &Image) -> Palette {
    let m = img.mean_color();
    let dist = |p: Palette| {
        let c = p.mean_color();
        (0..3).map(|i| (m[i] - c[i]).powi(2)).sum::<f64>()
    };
    Palette::ALL
        .into_iter()
        .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .expect("non-empty")
}

/// Mean edge density per shape kind over generated reference images.
pub fn shape_edge_centroids(spec: &DatasetSpec) -> Result<[f64; 4]> {
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for i in 0..spec.num_images.min(256) {
        let (img, tok) = data::generate(spec, i)?;
        let s = tok % ShapeKind::ALL.len();
        sums[s] += img.edge_density();
        counts[s] += 1;
    }
    Ok([0, 1, 2, 3].map(|s| sums[s] / counts[s].max(1) as f64))
}

fn nearest_shape(img: &Image, centroids: &[f64; 4]) -> ShapeKind {
    let e = img.edge_density();
    let best = (0..4)
        .min_by(|&a, &b| (centroids[a] - e).abs().total_cmp(&(centroids[b] - e).abs()))
        .expect("non-empty");
    ShapeKind::ALL[best]
}

/// One translation request.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub source: Image,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub branch: BandKind,
    pub count: usize,
    /// Consistency over the branch's band.
    pub band: MetricSummary,
    /// Consistency over the complementary band; absent for the full band.
    pub complement: Option<MetricSummary>,
    /// Fraction whose nearest palette matches the target's.
    pub palette_agreement: f64,
    /// Fraction whose nearest edge-density class matches the target's shape.
    pub shape_agreement: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "branch\t{}", self.branch)?;
        writeln!(f, "pairs\t{}", self.count)?;
        writeln!(f, "band_consistency\t{}", self.band)?;
        match &self.complement {
            Some(c) => writeln!(f, "complement_consistency\t{c}")?,
            None => writeln!(f, "complement_consistency\tn/a")?,
        }
        writeln!(f, "palette_agreement\t{:.4}", self.palette_agreement)?;
        writeln!(f, "shape_agreement\t{:.4}", self.shape_agreement)
    }
}

/// Summarizes `outputs[i]` against `pairs[i]`.
pub fn score(pairs: &[EvalPair], outputs: &[Image], branch: BandKind, centroids: &[f64; 4]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if outputs.len() != pairs.len() {
        return Err(Error::Data(format!("{} outputs for {} pairs", outputs.len(), pairs.len())));
    }
    let (mut band, mut comp) = (Vec::new(), Vec::new());
    let (mut palette_hits, mut shape_hits) = (0usize, 0usize);
    for (pair, out) in pairs.iter().zip(outputs) {
        let a = data::encode::<f64>(&pair.source)?;
        let b = data::encode::<f64>(out)?;
        let mask = make_mask(branch, a.h(), a.w())?;
        band.push(band_consistency(&a, &b, &mask)?);
        let c = mask.complement();
        if c.count() > 0 {
            comp.push(band_consistency(&a, &b, &c)?);
        }
        let (palette, shape) = data::token_parts(pair.target)?;
        palette_hits += (nearest_palette(out) == palette) as usize;
        shape_hits += (nearest_shape(out, centroids) == shape) as usize;
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        branch,
        count: pairs.len(),
        band: MetricSummary::of(&band),
        complement: (!comp.is_empty()).then(|| MetricSummary::of(&comp)),
        palette_agreement: palette_hits as f64 / n,
        shape_agreement: shape_hits as f64 / n,
    })
}

/// Translates every pair (seed derived per pair) and scores the results.
pub fn evaluate(
    p: &ModelParams<f32>,
    sched: &NoiseSchedule,
    pairs: &[EvalPair],
    branch: BandKind,
    opts: &TranslateOptions,
    seed: u64,
    reference: &DatasetSpec,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let outputs = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| translate(p, sched, &pair.source, pair.target, branch, opts, seed::derive(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    score(pairs, &outputs, branch, &shape_edge_centroids(reference)?)
}
