//! DCT-domain band masks, the frequency filtering pipeline, the equifrequency
//! shuffle and band-level energy analytics.
//!
//! Bands are sets of anti-diagonals of the spectrum: coefficient `(u, v)` sits
//! on frequency level `u + v`. The four named bands are anchored at a 64x64
//! grid (maximum level 126) with inclusive cutoffs 10 (mini), 20 (low),
//! (20, 40] (mid) and >= 50 (high). Other grid sizes compare the normalized
//! level `(u + v) / (h + w - 2)` against the same fractions, so on 64x64 the
//! integer thresholds are reproduced exactly. Levels 41..=49 at 64x64 belong
//! to no named band.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::spectral::Dct2d;
use crate::tensor::{Real, Shape, SpatialTensor, SpectralTensor};

/// Maximum frequency level of the 64x64 anchor grid.
const ANCHOR_LEVEL: usize = 126;
const MINI_CUTOFF: usize = 10;
const LOW_CUTOFF: usize = 20;
const MID_CUTOFF: usize = 40;
const HIGH_CUTOFF: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BandKind {
    Mini,
    Low,
    Mid,
    High,
    /// Raw levels `lo <= u + v <= hi`, independent of grid size.
    Custom { lo: usize, hi: usize },
}

impl BandKind {
    pub const NAMED: [BandKind; 4] = [BandKind::Mini, BandKind::Low, BandKind::Mid, BandKind::High];

    /// Every level of any grid.
    pub const FULL: BandKind = BandKind::Custom {
        lo: 0,
        hi: usize::MAX,
    };

    /// Identifier used in checkpoint parameter names.
    pub fn key(&self) -> String {
        match self {
            BandKind::Mini => "mini".into(),
            BandKind::Low => "low".into(),
            BandKind::Mid => "mid".into(),
            BandKind::High => "high".into(),
            BandKind::Custom { lo, hi } if *hi == usize::MAX => format!("custom_{lo}_max"),
            BandKind::Custom { lo, hi } => format!("custom_{lo}_{hi}"),
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        match key {
            "mini" => Ok(BandKind::Mini),
            "low" => Ok(BandKind::Low),
            "mid" => Ok(BandKind::Mid),
            "high" => Ok(BandKind::High),
            other => {
                let rest = other
                    .strip_prefix("custom_")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown band key `{other}`")))?;
                let (lo, hi) = rest
                    .split_once('_')
                    .ok_or_else(|| Error::InvalidArgument(format!("bad custom band `{other}`")))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad custom band `{other}`")))
                };
                let hi = if hi == "max" { usize::MAX } else { parse(hi)? };
                Ok(BandKind::Custom { lo: parse(lo)?, hi })
            }
        }
    }

    /// Whether frequency level `level` of a grid whose largest level is
    /// `max_level` falls in this band.
    pub fn contains_level(&self, level: usize, max_level: usize) -> bool {
        // level / max_level <= cutoff / ANCHOR_LEVEL, cross-multiplied.
        let scaled = level * ANCHOR_LEVEL;
        match *self {
            BandKind::Mini => scaled <= MINI_CUTOFF * max_level,
            BandKind::Low => scaled <= LOW_CUTOFF * max_level,
            BandKind::Mid => scaled > LOW_CUTOFF * max_level && scaled <= MID_CUTOFF * max_level,
            // A 1x1 grid has normalized level 0, which is never high.
            BandKind::High => max_level > 0 && scaled >= HIGH_CUTOFF * max_level,
            BandKind::Custom { lo, hi } => lo <= level && level <= hi,
        }
    }
}

impl fmt::Display for BandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandKind::Mini => f.write_str("mini"),
            BandKind::Low => f.write_str("low"),
            BandKind::Mid => f.write_str("mid"),
            BandKind::High => f.write_str("high"),
            BandKind::Custom { lo: 0, hi: usize::MAX } => f.write_str("full"),
            BandKind::Custom { lo, hi } => write!(f, "custom:{lo}:{hi}"),
        }
    }
}

impl FromStr for BandKind {
    type Err = Error;

    /// Accepts `mini`, `low`, `mid`, `high`, `full` and `custom:LO:HI`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(BandKind::Mini),
            "low" => Ok(BandKind::Low),
            "mid" => Ok(BandKind::Mid),
            "high" => Ok(BandKind::High),
            "full" => Ok(BandKind::FULL),
            other => {
                let bad = || Error::InvalidArgument(format!("unknown band `{other}`"));
                let rest = other.strip_prefix("custom:").ok_or_else(bad)?;
                let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
                let lo = lo.trim().parse().map_err(|_| bad())?;
                let hi = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(Error::InvalidRange { lo, hi });
                }
                Ok(BandKind::Custom { lo, hi })
            }
        }
    }
}

/// Frequency level of a DCT coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyLevel {
    pub level: usize,
    pub normalized: f64,
}

impl FrequencyLevel {
    pub fn new(u: usize, v: usize, h: usize, w: usize) -> Self {
        let max = h + w - 2;
        let level = u + v;
        let normalized = if max == 0 { 0.0 } else { level as f64 / max as f64 };
        FrequencyLevel { level, normalized }
    }
}

/// Binary h x w selection over DCT coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    h: usize,
    w: usize,
    kind: BandKind,
    complement: bool,
    bits: Vec<bool>,
}

impl BandMask {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn kind(&self) -> BandKind {
        self.kind
    }

    pub fn is_complement(&self) -> bool {
        self.complement
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.w + v]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of selected coefficients per channel.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The mask selecting exactly the coefficients this one rejects.
    pub fn complement(&self) -> BandMask {
        BandMask {
            h: self.h,
            w: self.w,
            kind: self.kind,
            complement: !self.complement,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

pub fn make_mask(kind: BandKind, h: usize, w: usize) -> Result<BandMask> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidSize(format!("mask {h}x{w}")));
    }
    if let BandKind::Custom { lo, hi } = kind {
        if lo > hi {
            return Err(Error::InvalidRange { lo, hi });
        }
    }
    let max_level = h + w - 2;
    let mut bits = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            bits.push(kind.contains_level(u + v, max_level));
        }
    }
    Ok(BandMask {
        h,
        w,
        kind,
        complement: false,
        bits,
    })
}

fn check_mask(shape: Shape, mask: &BandMask) -> Result<()> {
    if shape.h != mask.h || shape.w != mask.w {
        return Err(Error::shape(
            format!("{}x{} mask", shape.h, shape.w),
            format!("{}x{} mask", mask.h, mask.w),
        ));
    }
    Ok(())
}

/// Elementwise product of every channel with the mask. Rejected
/// coefficients are exactly zero.
pub fn apply_mask<T: Real>(f: &SpectralTensor<T>, mask: &BandMask) -> Result<SpectralTensor<T>> {
    let shape = f.shape();
    check_mask(shape, mask)?;
    let c = shape.c;
    let mut out = f.clone();
    for (cell, chunk) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if !mask.bits[cell] {
            chunk.fill(T::zero());
        }
    }
    Ok(out)
}

/// Positions `(u, v)` with `u + v = level`, in increasing `u`.
fn level_positions(h: usize, w: usize, level: usize) -> impl Iterator<Item = (usize, usize)> {
    let u_lo = level.saturating_sub(w - 1);
    let u_hi = level.min(h - 1);
    (u_lo..=u_hi).map(move |u| (u, level - u))
}

/// Seeded permutation of coefficients within each frequency level.
///
/// Each (channel, level) group draws its own permutation from a stream
/// derived from `(seed, channel, level)`; with `shared_channels` every
/// channel uses the channel-0 permutation.
pub fn equifrequency_shuffle_with<T: Real>(
    f: &SpectralTensor<T>,
    seed: u64,
    shared_channels: bool,
) -> Result<SpectralTensor<T>> {
    f.ensure_finite()?;
    let shape = f.shape();
    let mut out = f.clone();
    for ch in 0..shape.c {
        let stream_channel = if shared_channels { 0 } else { ch as u64 };
        for level in 0..=shape.max_level() {
            let positions: Vec<_> = level_positions(shape.h, shape.w, level).collect();
            if positions.len() < 2 {
                continue;
            }
            let mut order: Vec<usize> = (0..positions.len()).collect();
            let mut rng = seed::rng(seed, &[stream_channel, level as u64]);
            order.shuffle(&mut rng);
            for (&(u, v), &src) in positions.iter().zip(&order) {
                let (su, sv) = positions[src];
                out.set(u, v, ch, f.get(su, sv, ch));
            }
        }
    }
    Ok(out)
}

/// [`equifrequency_shuffle_with`] using an independent permutation per channel.
pub fn equifrequency_shuffle<T: Real>(f: &SpectralTensor<T>, seed: u64) -> Result<SpectralTensor<T>> {
    equifrequency_shuffle_with(f, seed, false)
}

/// Shuffle settings for [`ffm_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleOptions {
    pub seed: u64,
    pub shared_channels: bool,
}

/// Frequency filtering module: `idct2(shuffle?(mask ⊙ dct2(z0)))`.
pub fn ffm_with<T: Real>(
    z0: &SpatialTensor<T>,
    mask: &BandMask,
    shuffle: Option<ShuffleOptions>,
) -> Result<SpatialTensor<T>> {
    z0.ensure_finite()?;
    check_mask(z0.shape(), mask)?;
    let dct = Dct2d::new(z0.h(), z0.w())?;
    let mut f = apply_mask(&dct.forward(z0)?, mask)?;
    if let Some(opts) = shuffle {
        f = equifrequency_shuffle_with(&f, opts.seed, opts.shared_channels)?;
    }
    dct.inverse(&f)
}

pub fn ffm<T: Real>(
    z0: &SpatialTensor<T>,
    mask: &BandMask,
    shuffle_seed: Option<u64>,
) -> Result<SpatialTensor<T>> {
    ffm_with(
        z0,
        mask,
        shuffle_seed.map(|seed| ShuffleOptions {
            seed,
            shared_channels: false,
        }),
    )
}

/// Energy per frequency level, summed over channels, for levels
/// `0..=h+w-2` in ascending order.
///
/// Each level is summed in ascending order of its squared terms, so the
/// profile is bit-identical under any permutation within a level.
pub fn band_energy_profile<T: Real>(f: &SpectralTensor<T>) -> Vec<(usize, T)> {
    let shape = f.shape();
    let mut terms: Vec<T> = Vec::new();
    (0..=shape.max_level())
        .map(|level| {
            terms.clear();
            for (u, v) in level_positions(shape.h, shape.w, level) {
                terms.extend((0..shape.c).map(|ch| {
                    let x = f.get(u, v, ch);
                    x * x
                }));
            }
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            (level, terms.iter().fold(T::zero(), |acc, &e| acc + e))
        })
        .collect()
}

/// Sum of squared coefficients selected by `mask`, over all channels.
pub fn masked_energy<T: Real>(f: &SpectralTensor<T>, mask: &BandMask) -> Result<f64> {
    check_mask(f.shape(), mask)?;
    let c = f.c();
    Ok(f
        .data()
        .chunks_exact(c)
        .zip(&mask.bits)
        .filter(|(_, &keep)| keep)
        .flat_map(|(chunk, _)| chunk.iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum())
}

/// `1 - ‖M⊙dct2(x) - M⊙dct2(y)‖ / ‖M⊙dct2(x)‖`, evaluated in f64.
pub fn band_consistency<T: Real>(
    x: &SpatialTensor<T>,
    y: &SpatialTensor<T>,
    mask: &BandMask,
) -> Result<f64> {
    y.ensure_shape(x.shape())?;
    check_mask(x.shape(), mask)?;
    let dct = Dct2d::<f64>::new(x.h(), x.w())?;
    let fx = apply_mask(&dct.forward(&x.cast())?, mask)?;
    let fy = apply_mask(&dct.forward(&y.cast())?, mask)?;
    let reference = fx.energy().sqrt();
    if reference == 0.0 {
        return Err(Error::UndefinedMetric("masked reference spectrum is zero"));
    }
    let diff = fx.zip_map(&fy, |a, b| a - b)?.energy().sqrt();
    Ok(1.0 - diff / reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dct2, idct2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> SpatialTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpatialTensor::randn(Shape::new(h, w, c).unwrap(), &mut rng)
    }

    #[test]
    fn named_masks_at_anchor_size() {
        let mini = make_mask(BandKind::Mini, 64, 64).unwrap();
        let low = make_mask(BandKind::Low, 64, 64).unwrap();
        let mid = make_mask(BandKind::Mid, 64, 64).unwrap();
        let high = make_mask(BandKind::High, 64, 64).unwrap();
        assert!(mini.get(5, 5));
        assert!(!mini.get(6, 5));
        assert!(low.get(20, 0));
        assert!(!mid.get(20, 0));
        assert!(mid.get(21, 0));
        assert!(mid.get(40, 0));
        assert!(!mid.get(41, 0));
        assert!(high.get(25, 25));
        for m in [&mini, &low, &mid, &high] {
            assert!(!m.get(45, 0) && !m.get(20, 25) && !m.get(0, 45));
        }
    }

    #[test]
    fn scaled_masks_on_small_grid() {
        // 16x16: max level 30, cutoffs 10/126, 20/126, 40/126, 50/126 of it.
        let levels = |k| -> Vec<usize> {
            (0..=30).filter(|&l| BandKind::contains_level(&k, l, 30)).collect()
        };
        assert_eq!(levels(BandKind::Mini), vec![0, 1, 2]);
        assert_eq!(levels(BandKind::Low), vec![0, 1, 2, 3, 4]);
        assert_eq!(levels(BandKind::Mid), vec![5, 6, 7, 8, 9]);
        assert_eq!(levels(BandKind::High), (12..=30).collect::<Vec<_>>());
        for kind in BandKind::NAMED {
            assert!(make_mask(kind, 16, 16).unwrap().count() > 0);
        }
    }

    #[test]
    fn single_cell_grid() {
        assert!(make_mask(BandKind::Mini, 1, 1).unwrap().get(0, 0));
        assert!(!make_mask(BandKind::High, 1, 1).unwrap().get(0, 0));
        assert!(!make_mask(BandKind::Mid, 1, 1).unwrap().get(0, 0));
    }

    #[test]
    fn custom_masks() {
        let full = make_mask(BandKind::Custom { lo: 0, hi: 14 }, 5, 11).unwrap();
        assert_eq!(full.count(), 55);
        assert!(matches!(
            make_mask(BandKind::Custom { lo: 3, hi: 2 }, 4, 4),
            Err(Error::InvalidRange { lo: 3, hi: 2 })
        ));
        assert!(matches!(make_mask(BandKind::Low, 0, 4), Err(Error::InvalidSize(_))));
        let m = make_mask(BandKind::Custom { lo: 2, hi: 3 }, 4, 4).unwrap();
        assert_eq!(m.count(), 3 + 4);
        assert_eq!(m.complement().count(), 16 - 7);
    }

    #[test]
    fn band_parsing() {
        assert_eq!("low".parse::<BandKind>().unwrap(), BandKind::Low);
        assert_eq!("full".parse::<BandKind>().unwrap(), BandKind::FULL);
        assert_eq!(
            "custom:3:7".parse::<BandKind>().unwrap(),
            BandKind::Custom { lo: 3, hi: 7 }
        );
        assert!(matches!("ultra".parse::<BandKind>(), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            "custom:7:3".parse::<BandKind>(),
            Err(Error::InvalidRange { .. })
        ));
        for kind in [BandKind::Mid, BandKind::FULL, BandKind::Custom { lo: 1, hi: 4 }] {
            assert_eq!(BandKind::from_key(&kind.key()).unwrap(), kind);
            assert_eq!(kind.to_string().parse::<BandKind>().unwrap(), kind);
        }
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let f = dct2(&random(6, 6, 2, 1)).unwrap();
        let ones = make_mask(BandKind::FULL, 6, 6).unwrap();
        assert_eq!(apply_mask(&f, &ones).unwrap(), f);
        let zeros = ones.complement();
        assert!(apply_mask(&f, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = make_mask(BandKind::Low, 6, 5).unwrap();
        assert!(matches!(apply_mask(&f, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn mini_output_agrees_with_low_output() {
        let f = dct2(&random(64, 64, 2, 2)).unwrap();
        let mini_mask = make_mask(BandKind::Mini, 64, 64).unwrap();
        let mini = apply_mask(&f, &mini_mask).unwrap();
        let low = apply_mask(&f, &make_mask(BandKind::Low, 64, 64).unwrap()).unwrap();
        for u in 0..64 {
            for v in 0..64 {
                if mini_mask.get(u, v) {
                    for ch in 0..2 {
                        assert_eq!(mini.get(u, v, ch), low.get(u, v, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn ffm_full_band_round_trips() {
        let z = random(16, 16, 12, 3);
        let c = ffm(&z, &make_mask(BandKind::FULL, 16, 16).unwrap(), None).unwrap();
        assert!(c.max_abs_diff(&z) < 1e-5);
    }

    #[test]
    fn ffm_output_is_band_limited() {
        let z = random(16, 16, 4, 4);
        let mask = make_mask(BandKind::Low, 16, 16).unwrap();
        let c = ffm(&z, &mask, None).unwrap();
        let f = dct2(&c).unwrap();
        for u in 0..16 {
            for v in 0..16 {
                if !mask.get(u, v) {
                    for ch in 0..4 {
                        assert!(f.get(u, v, ch).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn ffm_is_idempotent() {
        let z = random(16, 12, 3, 5);
        for kind in BandKind::NAMED {
            let mask = make_mask(kind, 16, 12).unwrap();
            let once = ffm(&z, &mask, None).unwrap();
            let twice = ffm(&once, &mask, None).unwrap();
            assert!(twice.max_abs_diff(&once) < 2e-5);
        }
    }

    fn sorted_levels(f: &SpectralTensor<f32>) -> Vec<Vec<f32>> {
        let s = f.shape();
        (0..=s.max_level())
            .flat_map(|l| {
                (0..s.c).map(move |ch| {
                    let mut v: Vec<f32> =
                        level_positions(s.h, s.w, l).map(|(u, vv)| f.get(u, vv, ch)).collect();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    v
                })
            })
            .collect()
    }

    #[test]
    fn shuffled_ffm_keeps_level_multisets() {
        let z = random(16, 16, 3, 6);
        let mask = make_mask(BandKind::Mini, 16, 16).unwrap();
        let plain = dct2(&ffm(&z, &mask, None).unwrap()).unwrap();
        let shuffled = dct2(&ffm(&z, &mask, Some(17)).unwrap()).unwrap();
        for (a, b) in sorted_levels(&plain).iter().zip(&sorted_levels(&shuffled)) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert!(shuffled.max_abs_diff(&plain) > 1e-3);
    }

    #[test]
    fn shuffle_keeps_dc_and_is_deterministic() {
        let f = dct2(&random(8, 8, 2, 7)).unwrap();
        for s in 0..10 {
            let g = equifrequency_shuffle(&f, s).unwrap();
            assert_eq!(g.get(0, 0, 0), f.get(0, 0, 0));
            assert_eq!(g.get(0, 0, 1), f.get(0, 0, 1));
            assert_eq!(g, equifrequency_shuffle(&f, s).unwrap());
        }
        assert_ne!(
            equifrequency_shuffle(&f, 1).unwrap(),
            equifrequency_shuffle(&f, 2).unwrap()
        );
    }

    #[test]
    fn shared_channel_shuffle_moves_channels_together() {
        // Channel 1 = 2 x channel 0, so a shared permutation keeps the ratio.
        let base = random(8, 8, 1, 8);
        let z = SpatialTensor::from_fn(Shape::new(8, 8, 2).unwrap(), |i, j, ch| {
            base.get(i, j, 0) * (ch as f32 + 1.0)
        });
        let f = dct2(&z).unwrap();
        let shared = equifrequency_shuffle_with(&f, 3, true).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                assert_eq!(shared.get(u, v, 1), 2.0 * shared.get(u, v, 0));
            }
        }
        let separate = equifrequency_shuffle_with(&f, 3, false).unwrap();
        assert_ne!(separate, shared);
    }

    #[test]
    fn energy_profile_of_delta() {
        let x = SpatialTensor::<f64>::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let profile = band_energy_profile(&dct2(&x).unwrap());
        let expected = [(0, 0.25), (1, 0.5), (2, 0.25)];
        assert_eq!(profile.len(), 3);
        for ((l, e), (el, ee)) in profile.iter().zip(expected) {
            assert_eq!(*l, el);
            assert!((e - ee).abs() < 1e-12);
        }
        let zero = SpectralTensor::<f32>::zeros(Shape::new(3, 4, 2).unwrap());
        assert!(band_energy_profile(&zero).iter().all(|&(_, e)| e == 0.0));
    }

    #[test]
    fn consistency_reference_values() {
        let x = random(16, 16, 12, 9);
        let mask = make_mask(BandKind::Low, 16, 16).unwrap();
        assert_eq!(band_consistency(&x, &x, &mask).unwrap(), 1.0);
        let zero = SpatialTensor::zeros(x.shape());
        assert!((band_consistency(&x, &zero, &mask).unwrap()).abs() < 1e-12);
        let filtered = ffm(&x, &mask, None).unwrap();
        assert!(band_consistency(&x, &filtered, &mask).unwrap() >= 1.0 - 1e-4);
        assert!(matches!(
            band_consistency(&zero, &x, &mask),
            Err(Error::UndefinedMetric(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shuffle_preserves_level_energy_and_multisets(
            h in 1usize..12, w in 1usize..12, c in 1usize..4, seed in any::<u64>(), data_seed in any::<u64>()
        ) {
            let f = dct2(&random(h, w, c, data_seed)).unwrap();
            let g = equifrequency_shuffle(&f, seed).unwrap();
            prop_assert_eq!(band_energy_profile(&f), band_energy_profile(&g));
            prop_assert_eq!(sorted_levels(&f), sorted_levels(&g));
        }

        #[test]
        fn masking_never_adds_energy(h in 1usize..12, w in 1usize..12, lo in 0usize..10, span in 0usize..10, data_seed in any::<u64>()) {
            let f = dct2(&random(h, w, 2, data_seed)).unwrap();
            let mask = make_mask(BandKind::Custom { lo, hi: lo + span }, h, w).unwrap();
            let masked = apply_mask(&f, &mask).unwrap();
            prop_assert!(masked.energy() <= f.energy());
            let profile_sum: f32 = band_energy_profile(&f).iter().map(|&(_, e)| e).sum();
            prop_assert!((profile_sum - f.energy()).abs() <= 1e-4 * f.energy().max(1.0));
        }

        #[test]
        fn round_trip_holds_on_assorted_shapes(h in 1usize..20, w in 1usize..20, c in 1usize..4, data_seed in any::<u64>()) {
            let z = random(h, w, c, data_seed);
            let back = idct2(&dct2(&z).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&z) < 1e-5);
        }
    }
}
