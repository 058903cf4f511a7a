//! Full training pipeline and the paired band-mechanism comparison on
//! held-out sources.

use std::fmt;

use rand::Rng;

use crate::control_net::{denoising_loss, ModelParams, Sample};
use crate::data::{self, DatasetSpec};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::filters::BandKind;
use crate::seed;
use crate::tensor::SpatialTensor;
use crate::training::{
    image_band_consistency, mean_color_distance, pixel_correlation, pretrain, sample_uncontrolled, train_branch,
    translate, Stage, TrainConfig, TrainReport, TranslateOptions,
};

/// Pretrains on the training split of `cfg.dataset`, then trains each of
/// `branches` in order with the same step count, batch size and optimizer.
pub fn train_pipeline(cfg: &TrainConfig, branches: &[BandKind]) -> Result<(ModelParams<f32>, Vec<TrainReport>)> {
    let (train_idx, _) = cfg.dataset.split();
    let dataset = data::encode_all(&cfg.dataset, &train_idx)?;
    let base_cfg = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.clone()
    };
    let (mut model, report) = pretrain(&base_cfg, &dataset)?;
    let mut reports = vec![report];
    for &kind in branches {
        let branch_cfg = TrainConfig {
            stage: Stage::Branch(kind),
            ..cfg.clone()
        };
        let (next, report) = train_branch(&branch_cfg, &model, &dataset)?;
        model = next;
        reports.push(report);
    }
    Ok((model, reports))
}

/// Mean denoising loss over the held-out split, each image paired with
/// `draws` seeded `(t, noise)` draws that do not depend on `branch`.
pub fn held_out_loss(
    p: &ModelParams<f32>,
    branch: Option<BandKind>,
    spec: &DatasetSpec,
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let (_, held_out) = spec.split();
    let latents = data::encode_all(spec, &held_out)?;
    if latents.is_empty() || draws == 0 {
        return Err(Error::Data("no held-out examples".into()));
    }
    let mut rng = seed::rng(seed, &[0x4E1D]);
    let mut total = 0.0;
    for (z0, cond) in &latents {
        let batch: Vec<Sample<f32>> = (0..draws)
            .map(|_| Sample {
                z0: z0.clone(),
                cond: *cond,
                t: rng.random_range(1..=sched.timesteps()),
                eps: SpatialTensor::randn(z0.shape(), &mut rng),
            })
            .collect();
        total += denoising_loss(p, branch, &batch, sched)? as f64;
    }
    Ok(total / latents.len() as f64)
}

/// Per-source measurements. Every sample for one source shares its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismRow {
    pub source_index: usize,
    pub token: usize,
    /// Low-band consistency of the low-branch translation.
    pub low_controlled: f64,
    /// Low-band consistency of the uncontrolled sample.
    pub low_uncontrolled: f64,
    /// Mean-color distance to the source, mini branch with shuffle.
    pub color_shuffled: f64,
    /// Mean-color distance to the source, uncontrolled sample.
    pub color_uncontrolled: f64,
    /// Pixel correlation with the source, mini branch with shuffle.
    pub corr_shuffled: f64,
    /// Pixel correlation with the source, mini branch without shuffle.
    pub corr_plain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismReport {
    pub rows: Vec<MechanismRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

impl MechanismReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn low_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.low_controlled > r.low_uncontrolled).count()
    }

    pub fn color_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.color_shuffled < r.color_uncontrolled).count()
    }

    pub fn mean_low_controlled(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.low_controlled))
    }

    pub fn mean_low_uncontrolled(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.low_uncontrolled))
    }

    pub fn mean_color_shuffled(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.color_shuffled))
    }

    pub fn mean_color_uncontrolled(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.color_uncontrolled))
    }

    pub fn mean_corr_shuffled(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.corr_shuffled))
    }

    pub fn mean_corr_plain(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.corr_plain))
    }
}

impl fmt::Display for MechanismReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "source\ttoken\tlow_ctl\tlow_unc\tcolor_shuf\tcolor_unc\tcorr_shuf\tcorr_plain")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.4}\t{:.4}",
                r.source_index,
                r.token,
                r.low_controlled,
                r.low_uncontrolled,
                r.color_shuffled,
                r.color_uncontrolled,
                r.corr_shuffled,
                r.corr_plain
            )?;
        }
        Ok(())
    }
}

/// Compares low-branch and mini-branch translations against uncontrolled
/// samples on the first `count` held-out images. The target token is the
/// source's own label.
pub fn compare_bands(
    p: &ModelParams<f32>,
    sched: &NoiseSchedule,
    spec: &DatasetSpec,
    count: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MechanismReport> {
    let (_, held_out) = spec.split();
    if count == 0 || held_out.len() < count {
        return Err(Error::Data(format!(
            "{count} sources requested, {} held-out images available",
            held_out.len()
        )));
    }
    let plain = TranslateOptions {
        sampler: *sampler,
        ..TranslateOptions::default()
    };
    let shuffled = TranslateOptions { shuffle: true, ..plain };
    let rows = held_out[..count]
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (source, token) = data::generate(spec, i)?;
            let s = seed::derive(seed, &[k as u64]);
            let low = translate(p, sched, &source, token, BandKind::Low, &plain, s)?;
            let unc = sample_uncontrolled(p, sched, spec.size, token, sampler, s)?;
            let mini_shuf = translate(p, sched, &source, token, BandKind::Mini, &shuffled, s)?;
            let mini_plain = translate(p, sched, &source, token, BandKind::Mini, &plain, s)?;
            Ok(MechanismRow {
                source_index: i,
                token,
                low_controlled: image_band_consistency(&source, &low, BandKind::Low)?,
                low_uncontrolled: image_band_consistency(&source, &unc, BandKind::Low)?,
                color_shuffled: mean_color_distance(&mini_shuf, &source),
                color_uncontrolled: mean_color_distance(&unc, &source),
                corr_shuffled: pixel_correlation(&mini_shuf, &source)?,
                corr_plain: pixel_correlation(&mini_plain, &source)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MechanismReport { rows })
}
