//! Invariant suites run by the `selftest` command.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::control_net::{forward_base, forward_controlled, ModelConfig, ModelParams};
use crate::diffusion::{ddim_sample, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::filters::{band_energy_profile, equifrequency_shuffle, make_mask, BandKind};
use crate::gradcheck::{gradient_check, GradCheckConfig};
use crate::seed;
use crate::spectral::Dct2d;
use crate::tensor::{Shape, SpatialTensor, SpectralTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict}\t{}\t{}\t{:.2}s",
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> SuiteReport {
    let started = Instant::now();
    let (passed, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteReport {
        name,
        passed,
        detail,
        elapsed: started.elapsed(),
    }
}

/// Direct evaluation of the orthonormal 2-D DCT-II, one coefficient at a time.
pub fn dct2_reference(x: &SpatialTensor<f64>) -> SpectralTensor<f64> {
    let (h, w) = (x.h(), x.w());
    let scale = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let pi = std::f64::consts::PI;
    SpectralTensor::from_fn(x.shape(), |u, v, ch| {
        let mut acc = 0.0;
        for i in 0..h {
            let cu = ((2 * i + 1) as f64 * u as f64 * pi / (2 * h) as f64).cos();
            for j in 0..w {
                let cv = ((2 * j + 1) as f64 * v as f64 * pi / (2 * w) as f64).cos();
                acc += x.get(i, j, ch) * cu * cv;
            }
        }
        scale(u, h) * scale(v, w) * acc
    })
}

pub fn transform_suite(seed: u64) -> SuiteReport {
    timed("transform", || {
        let mut rng = seed::rng(seed, &[0x7F]);
        let (mut round_trip, mut parseval) = (0.0f64, 0.0f64);
        for k in 0..100 {
            let shape = if k == 0 {
                Shape::new(64, 64, 4)?
            } else {
                Shape::new(rng.random_range(1..=40), rng.random_range(1..=40), rng.random_range(1..=4))?
            };
            let x = SpatialTensor::<f32>::randn(shape, &mut rng);
            let dct = Dct2d::<f32>::new(shape.h, shape.w)?;
            let f = dct.forward(&x)?;
            let back = dct.inverse(&f)?;
            round_trip = round_trip.max(back.max_abs_diff(&x) as f64);
            let ex: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
            let ef: f64 = f.data().iter().map(|&v| (v as f64).powi(2)).sum();
            parseval = parseval.max((ex - ef).abs() / ex);
        }
        let x = SpatialTensor::<f64>::randn(Shape::new(16, 16, 3)?, &mut rng);
        let fast = Dct2d::<f32>::new(16, 16)?.forward(&x.cast::<f32>())?;
        let oracle = dct2_reference(&x);
        let agreement = fast
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        let ok = round_trip < 1e-5 && parseval < 1e-6 && agreement < 1e-4;
        Ok((
            ok,
            format!("round_trip={round_trip:.2e} parseval={parseval:.2e} oracle={agreement:.2e}"),
        ))
    })
}

pub fn mask_suite() -> SuiteReport {
    timed("mask", || {
        let n = 64;
        let masks = BandKind::NAMED.map(|k| make_mask(k, n, n));
        let [mini, low, mid, high] = masks;
        let (mini, low, mid, high) = (mini?, low?, mid?, high?);
        let mut mismatches = 0usize;
        let mut violations = 0usize;
        for u in 0..n {
            for v in 0..n {
                let l = u + v;
                let expect = [l <= 10, l <= 20, l > 20 && l <= 40, l >= 50];
                let got = [mini.get(u, v), low.get(u, v), mid.get(u, v), high.get(u, v)];
                mismatches += expect.iter().zip(&got).filter(|(e, g)| e != g).count();
                if (41..=49).contains(&l) && got.iter().any(|&b| b) {
                    violations += 1;
                }
                if (got[0] && !got[1]) || (got[1] && (got[2] || got[3])) {
                    violations += 1;
                }
            }
        }
        Ok((
            mismatches == 0 && violations == 0,
            format!("mismatches={mismatches} violations={violations}"),
        ))
    })
}

pub fn shuffle_suite(seed: u64) -> SuiteReport {
    timed("shuffle", || {
        let mut rng = seed::rng(seed, &[0x5B]);
        let shape = Shape::new(16, 12, 3)?;
        let f = SpectralTensor::<f32>::randn(shape, &mut rng);
        let profile = band_energy_profile(&f);
        let groups = |g: &SpectralTensor<f32>| -> Vec<Vec<u32>> {
            let mut out = vec![Vec::new(); shape.c * (shape.max_level() + 1)];
            for u in 0..shape.h {
                for v in 0..shape.w {
                    for ch in 0..shape.c {
                        out[ch * (shape.max_level() + 1) + u + v].push(g.get(u, v, ch).to_bits());
                    }
                }
            }
            out.iter_mut().for_each(|g| g.sort_unstable());
            out
        };
        let reference = groups(&f);
        let mut failures = 0usize;
        let mut moved = 0usize;
        for s in 0..50u64 {
            let g = equifrequency_shuffle(&f, s)?;
            failures += (groups(&g) != reference) as usize;
            failures += (band_energy_profile(&g)
                .iter()
                .zip(&profile)
                .any(|(a, b)| a.1.to_bits() != b.1.to_bits())) as usize;
            failures += (0..shape.c).any(|ch| g.get(0, 0, ch).to_bits() != f.get(0, 0, ch).to_bits()) as usize;
            failures += (equifrequency_shuffle(&f, s)? != g) as usize;
            moved += (g != f) as usize;
        }
        Ok((
            failures == 0 && moved > 0,
            format!("failures={failures} permuted={moved}/50"),
        ))
    })
}

/// Base model with every zero-initialized base tensor given random values,
/// so controlled and uncontrolled paths are non-trivial.
pub fn nontrivial_base(seed: u64, config: ModelConfig) -> ModelParams<f32> {
    let mut p = ModelParams::init(seed, config);
    p.randomize_zero_tensors(seed, 0.1, |name| name.starts_with("base."));
    p
}

pub fn zero_init_suite(seed: u64, sample_steps: usize) -> SuiteReport {
    timed("zero-init", || {
        let config = ModelConfig::default();
        let mut p = nontrivial_base(seed, config);
        let shape = Shape::new(16, 16, config.channels)?;
        let sched = NoiseSchedule::default();
        let mut rng = seed::rng(seed, &[0x2E]);
        p.attach_branch(BandKind::Low, seed)?;
        let mut differing = 0usize;
        for k in 0..20 {
            let z = SpatialTensor::<f32>::randn(shape, &mut rng);
            let c = SpatialTensor::<f32>::randn(shape, &mut rng);
            let t = rng.random_range(1..=sched.timesteps());
            let cond = k % config.vocab;
            let base = forward_base(&p, &z, t, cond)?;
            let ctl = forward_controlled(&p, BandKind::Low, &z, t, cond, &c)?;
            differing += (base.data().iter().zip(ctl.data()).any(|(a, b)| a.to_bits() != b.to_bits())) as usize;
        }
        let cfg = SamplerConfig {
            num_steps: sample_steps,
            ..SamplerConfig::default()
        };
        let control = SpatialTensor::<f32>::randn(shape, &mut rng);
        let plain = ddim_sample(&p, shape, 3, None, &cfg, &sched, seed)?;
        let steered = ddim_sample(&p, shape, 3, Some((BandKind::Low, &control)), &cfg, &sched, seed)?;
        let sample_equal = plain.data().iter().zip(steered.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((
            differing == 0 && sample_equal,
            format!("forward_mismatches={differing}/20 sample_identical={sample_equal}"),
        ))
    })
}

pub fn gradient_suite(cfg: &GradCheckConfig) -> SuiteReport {
    timed("gradient", || {
        let report = gradient_check(cfg)?;
        let mut p = ModelParams::<f64>::init(0, cfg.model);
        p.attach_branch(BandKind::Low, 0)?;
        let expected = p.named_tensors().len();
        let covered = report.tensors().len();
        let worst = report.max_rel_error();
        Ok((
            worst < 1e-3 && report.entries.len() >= 50 && covered == expected,
            format!(
                "max_rel_error={worst:.2e} scalars={} tensors={covered}/{expected} kink_retries={}",
                report.entries.len(),
                report.kink_skips
            ),
        ))
    })
}

/// Every suite at its standard size.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        transform_suite(seed),
        mask_suite(),
        shuffle_suite(seed),
        zero_init_suite(seed, SamplerConfig::default().num_steps),
        gradient_suite(&GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        for r in [transform_suite(1), mask_suite(), shuffle_suite(1), zero_init_suite(1, 5)] {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn report_line_format() {
        let r = mask_suite();
        assert!(r.to_string().starts_with("PASS\tmask\t"));
    }
}
