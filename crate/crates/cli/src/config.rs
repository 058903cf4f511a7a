//! `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::Path;

use fcdiff::data::DatasetSpec;
use fcdiff::training::{AdamConfig, ScheduleConfig, TrainConfig, TranslateOptions};
use fcdiff::SamplerConfig;

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub width: usize,
    pub num_images: usize,
    pub image_size: usize,
    pub dataset_seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub sample_steps: usize,
    pub eta: f64,
    pub clip_denoised: Option<f64>,
    pub shuffle_shared_channels: bool,
    pub eval_count: usize,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sampler = SamplerConfig::default();
        Config {
            timesteps: train.schedule.timesteps,
            beta_min: train.schedule.beta_min,
            beta_max: train.schedule.beta_max,
            width: train.width,
            num_images: train.dataset.num_images,
            image_size: train.dataset.size,
            dataset_seed: train.dataset.seed,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            batch_size: train.batch_size,
            steps: train.steps,
            seed: train.seed,
            sample_steps: sampler.num_steps,
            eta: sampler.eta,
            clip_denoised: sampler.clip_denoised,
            shuffle_shared_channels: false,
            eval_count: 32,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "timesteps",
    "beta_min",
    "beta_max",
    "width",
    "num_images",
    "image_size",
    "dataset_seed",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "steps",
    "seed",
    "sample_steps",
    "eta",
    "clip_denoised",
    "shuffle_shared_channels",
    "eval_count",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        match key.trim() {
            "timesteps" => self.timesteps = parse(key, v)?,
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "num_images" => self.num_images = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "dataset_seed" => self.dataset_seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "clip_denoised" => {
                self.clip_denoised = match v {
                    "none" | "off" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "shuffle_shared_channels" => self.shuffle_shared_channels = parse(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            other => return Err(usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "timesteps" => self.timesteps.to_string(),
            "beta_min" => self.beta_min.to_string(),
            "beta_max" => self.beta_max.to_string(),
            "width" => self.width.to_string(),
            "num_images" => self.num_images.to_string(),
            "image_size" => self.image_size.to_string(),
            "dataset_seed" => self.dataset_seed.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "eta" => self.eta.to_string(),
            "clip_denoised" => self.clip_denoised.map_or("none".into(), |b| b.to_string()),
            "shuffle_shared_channels" => self.shuffle_shared_channels.to_string(),
            "eval_count" => self.eval_count.to_string(),
            _ => return None,
        })
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_override(&mut self, kv: &str) -> anyhow::Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{kv}` is not `key=value`")))?;
        self.set(k, v)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            timesteps: self.timesteps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            num_images: self.num_images,
            size: self.image_size,
            seed: self.dataset_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
            schedule: self.schedule(),
            width: self.width,
            dataset: self.dataset(),
            ..TrainConfig::default()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sample_steps,
            eta: self.eta,
            clip_denoised: self.clip_denoised,
        }
    }

    pub fn translate_options(&self, shuffle: bool, allow_any_band: bool) -> TranslateOptions {
        TranslateOptions {
            shuffle,
            allow_shuffle_any_band: allow_any_band,
            shuffle_shared_channels: self.shuffle_shared_channels,
            sampler: self.sampler(),
        }
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key}={}", self.get(key).unwrap_or_default())?;
        }
        Ok(())
    }
}
