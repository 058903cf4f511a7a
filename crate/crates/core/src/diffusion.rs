//! DDPM forward noising, linear beta schedule and the DDIM reverse sampler.

use rand::Rng;

use crate::control_net::{forward_base, forward_controlled, ModelParams};
use crate::error::{Error, Result};
use crate::filters::BandKind;
use crate::seed;
use crate::tensor::{Real, Shape, SpatialTensor};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Per-timestep tables for `t = 1..=T`, stored in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                max: self.betas.len(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// `alpha_bar` extended with `alpha_bar(0) = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TIMESTEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// Linear beta from `beta_min` at t=1 to `beta_max` at t=T.
pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < {beta_min} <= {beta_max} < 1"
        )));
    }
    let mut betas = Vec::with_capacity(timesteps);
    let mut alphas = Vec::with_capacity(timesteps);
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut running = 1.0;
    for k in 0..timesteps {
        let frac = if timesteps == 1 {
            0.0
        } else {
            k as f64 / (timesteps - 1) as f64
        };
        let raw = beta_min + (beta_max - beta_min) * frac;
        // Both subtractions are exact, so alpha + beta == 1 holds bitwise.
        let alpha = 1.0 - raw;
        let beta = 1.0 - alpha;
        running *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(running);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// `z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps`.
pub fn q_sample<T: Real>(
    z0: &SpatialTensor<T>,
    t: usize,
    eps: &SpatialTensor<T>,
    sched: &NoiseSchedule,
) -> Result<SpatialTensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let a = T::lit(ab.sqrt());
    let b = T::lit((1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` yields the clean
/// estimate). `rng` is only drawn from when `eta > 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Real, R: Rng + ?Sized>(
    z_t: &SpatialTensor<T>,
    t: usize,
    t_prev: usize,
    eps_hat: &SpatialTensor<T>,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<SpatialTensor<T>> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "DDIM step must go backwards, got {t} -> {t_prev}"
        )));
    }
    if eta < 0.0 {
        return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
    }
    eps_hat.ensure_shape(z_t.shape())?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_or_one(t_prev)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let inv_sqrt_ab = T::lit(1.0 / ab_t.sqrt());
    let sqrt_one_minus_ab = T::lit((1.0 - ab_t).sqrt());
    let sqrt_ab_prev = T::lit(ab_prev.sqrt());
    let dir = T::lit((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
    let mut out = z_t.zip_map(eps_hat, |z, e| {
        let z0_hat = (z - sqrt_one_minus_ab * e) * inv_sqrt_ab;
        sqrt_ab_prev * z0_hat + dir * e
    })?;
    if sigma > 0.0 {
        let s = T::lit(sigma);
        for v in out.data_mut() {
            *v += s * T::sample_normal(rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    /// Clamp each step's clean-latent estimate to `[-bound, bound]` and
    /// re-derive the noise estimate from it before stepping.
    pub clip_denoised: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 50,
            eta: 0.0,
            clip_denoised: None,
        }
    }
}

/// Noise estimate consistent with `z0_hat` clamped to `[-bound, bound]`.
pub fn clip_noise_estimate<T: Real>(
    z_t: &SpatialTensor<T>,
    t: usize,
    eps_hat: &SpatialTensor<T>,
    sched: &NoiseSchedule,
    bound: f64,
) -> Result<SpatialTensor<T>> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {bound}")));
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let (lo, hi) = (T::lit(-bound), T::lit(bound));
    z_t.zip_map(eps_hat, |z, e| {
        let z0_hat = ((z - sb * e) / sa).max(lo).min(hi);
        (z - sa * z0_hat) / sb
    })
}

/// Descending visit order `T, T-s, ..., T-(n-1)s` with stride `s = ⌊T/n⌋`.
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampler steps must be in 1..={total}, got {num_steps}"
        )));
    }
    let stride = total / num_steps;
    Ok((0..num_steps).map(|k| total - k * stride).collect())
}

/// Runs the DDIM loop from seeded standard-normal noise, calling `predict`
/// once per visited timestep with the current latent.
pub fn ddim_sample_with<T: Real>(
    shape: Shape,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
    mut predict: impl FnMut(&SpatialTensor<T>, usize) -> Result<SpatialTensor<T>>,
) -> Result<SpatialTensor<T>> {
    let steps = ddim_timesteps(sched.timesteps(), cfg.num_steps)?;
    let mut init_rng = seed::rng(seed, &[0x5A3F]);
    let mut noise_rng = seed::rng(seed, &[0x5A40]);
    let mut z = SpatialTensor::randn(shape, &mut init_rng);
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let mut eps_hat = predict(&z, t)?;
        if let Some(bound) = cfg.clip_denoised {
            eps_hat = clip_noise_estimate(&z, t, &eps_hat, sched, bound)?;
        }
        z = ddim_step(&z, t, t_prev, &eps_hat, sched, cfg.eta, &mut noise_rng)?;
    }
    Ok(z)
}

/// Samples a latent of `shape` for label `cond`, steered by `control`
/// through the named branch when given. The branch must be attached.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<T: Real>(
    model: &ModelParams<T>,
    shape: Shape,
    cond: usize,
    control: Option<(BandKind, &SpatialTensor<T>)>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SpatialTensor<T>> {
    if let Some((kind, c)) = control {
        model.branch(kind)?;
        c.ensure_shape(shape)?;
    }
    ddim_sample_with(shape, cfg, sched, seed, |z, t| match control {
        Some((kind, c)) => forward_controlled(model, kind, z, t, cond, c),
        None => forward_base(model, z, t, cond),
    })
}
