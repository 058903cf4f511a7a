//! Central finite-difference check of [`loss_and_grads`] in 64-bit.
//!
//! Every layer is linear in any single parameter and the nonlinearity is
//! ReLU, so within one activation region the loss is an exact quadratic in
//! that parameter and the central difference is exact up to round-off.
//! Perturbations that flip a ReLU are detected from the activation
//! signature and resampled.

use rand::Rng;

use crate::control_net::{
    loss_and_grads, loss_and_signature, BranchTarget, ModelConfig, ModelParams, Sample, Trainable,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::filters::{make_mask, BandKind};
use crate::seed;
use crate::tensor::{Shape, SpatialTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub delta: f64,
    /// Sampled scalars per parameter tensor.
    pub per_tensor: usize,
    pub model: ModelConfig,
    pub latent: (usize, usize),
    pub batch: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            delta: 1e-3,
            per_tensor: 2,
            model: ModelConfig::default(),
            latent: (16, 16),
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(1e-6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Candidates dropped because a perturbation crossed a ReLU kink.
    pub kink_skips: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(GradCheckEntry::rel_error).fold(0.0, f64::max)
    }

    /// Distinct tensor names covered.
    pub fn tensors(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.dedup();
        names
    }
}

const CHECK_BRANCH: BandKind = BandKind::Low;
const MAX_TRIES: usize = 40;
const RESHIFT: f64 = 0.05;

/// Checks sampled scalars of every base tensor (base training) and every
/// branch tensor (branch training). Zero-initialized tensors are given
/// small random values first so gradients reach every layer.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut p = ModelParams::<f64>::init(cfg.seed, cfg.model);
    p.attach_branch(CHECK_BRANCH, cfg.seed)?;
    p.randomize_zero_tensors(cfg.seed, 0.05, |_| true);
    let mut rng = seed::rng(cfg.seed, &[0x6C4E]);
    let (h, w) = cfg.latent;
    let shape = Shape::new(h, w, cfg.model.channels)?;
    let sched = NoiseSchedule::default();
    let batch: Vec<Sample<f64>> = (0..cfg.batch)
        .map(|i| Sample {
            z0: SpatialTensor::randn(shape, &mut rng).scale(0.5),
            cond: (3 + 5 * i) % cfg.model.vocab,
            t: 1 + (137 + 503 * i) % sched.timesteps(),
            eps: SpatialTensor::randn(shape, &mut rng),
        })
        .collect();
    let mask = make_mask(CHECK_BRANCH, h, w)?;

    let mut report = GradCheckReport {
        entries: Vec::new(),
        kink_skips: 0,
    };
    for (group, target) in [
        (Trainable::Base, None),
        (
            Trainable::Branch(CHECK_BRANCH),
            Some(BranchTarget {
                kind: CHECK_BRANCH,
                mask: &mask,
            }),
        ),
    ] {
        let names: Vec<(usize, String)> = p
            .named_tensors()
            .iter()
            .enumerate()
            .filter(|(_, t)| group.owns(&t.name))
            .map(|(i, t)| (i, t.name.clone()))
            .collect();
        for (ti, name) in names {
            let len = p.named_tensors()[ti].values.len();
            let mut found = 0;
            for attempt in 0..MAX_TRIES {
                if found == cfg.per_tensor {
                    break;
                }
                let index = rng.random_range(0..len);
                // After a kink, retry around a shifted base point.
                let mut q = p.clone();
                if attempt >= cfg.per_tensor {
                    q.named_tensors_mut()[ti].values[index] += RESHIFT * (2.0 * rng.random::<f64>() - 1.0);
                }
                let (_, grads) = loss_and_grads(&q, target, &batch, &sched)?;
                let g = grads.named_tensors()[ti].values[index];
                if g == 0.0 {
                    continue;
                }
                let (_, sig0) = loss_and_signature(&q, target, &batch, &sched)?;
                let eval = |shift: f64| -> Result<(f64, bool)> {
                    let mut r = q.clone();
                    r.named_tensors_mut()[ti].values[index] += shift;
                    let (l, sig) = loss_and_signature(&r, target, &batch, &sched)?;
                    Ok((l, sig == sig0))
                };
                let (lp, same_p) = eval(cfg.delta)?;
                let (lm, same_m) = eval(-cfg.delta)?;
                if !(same_p && same_m) {
                    report.kink_skips += 1;
                    continue;
                }
                report.entries.push(GradCheckEntry {
                    name: name.clone(),
                    index,
                    analytic: g,
                    numeric: (lp - lm) / (2.0 * cfg.delta),
                });
                found += 1;
            }
            if found == 0 {
                return Err(Error::State(format!("no checkable scalar in `{name}`")));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_model_gradients_agree() {
        let cfg = GradCheckConfig {
            model: ModelConfig {
                channels: 3,
                vocab: 4,
                width: 4,
            },
            latent: (8, 8),
            per_tensor: 3,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&cfg).unwrap();
        assert!(report.max_rel_error() < 1e-3, "{:?}", report);
        assert_eq!(report.tensors().len(), 41);
        assert!(report.entries.len() >= 50);
    }
}
