//! Orthonormal 2-D DCT-II and its inverse, applied channel-wise.
//!
//! The 2-D transform is separable: for each channel `F = B_h · X · B_wᵀ`,
//! where `B_n[u][i] = sqrt(2/n) · m(u) · cos((2i+1)uπ / 2n)` with
//! `m(0) = 1/√2` and `m(u) = 1` otherwise. The product of the two 1-D
//! normalizations is exactly the `2/sqrt(hw) · m(u) m(v)` factor of the
//! double-sum definition, so the pair is orthonormal and energy preserving.
//!
//! Inner products are accumulated in a fixed index order, so transforming a
//! multi-channel tensor is bit-identical to transforming each channel alone.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, SpatialTensor, SpectralTensor};

/// Orthonormal DCT-II basis for one transform length.
#[derive(Debug, Clone, PartialEq)]
pub struct DctPlan<T = f32> {
    n: usize,
    /// Row `u`, column `i`.
    basis: Vec<T>,
}

impl<T: Real> DctPlan<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn basis(&self) -> &[T] {
        &self.basis
    }

    #[inline]
    pub fn at(&self, u: usize, i: usize) -> T {
        self.basis[u * self.n + i]
    }
}

/// Builds the `n x n` orthonormal DCT-II matrix.
pub fn dct_matrix<T: Real>(n: usize) -> Result<DctPlan<T>> {
    if n == 0 {
        return Err(Error::InvalidSize("DCT length must be at least 1".into()));
    }
    let nf = n as f64;
    let mut basis = Vec::with_capacity(n * n);
    for u in 0..n {
        let scale = if u == 0 { 1.0 / nf.sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let angle = (2 * i + 1) as f64 * u as f64 * PI / (2.0 * nf);
            basis.push(T::lit(scale * angle.cos()));
        }
    }
    Ok(DctPlan { n, basis })
}

/// Precomputed row and column bases for an `h x w` grid.
#[derive(Debug, Clone)]
pub struct Dct2d<T = f32> {
    rows: DctPlan<T>,
    cols: DctPlan<T>,
}

impl<T: Real> Dct2d<T> {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Ok(Dct2d {
            rows: dct_matrix(h)?,
            cols: dct_matrix(w)?,
        })
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape.h != self.rows.n || shape.w != self.cols.n {
            return Err(Error::shape(
                format!("{}x{}xC", self.rows.n, self.cols.n),
                shape,
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &SpatialTensor<T>) -> Result<SpectralTensor<T>> {
        x.ensure_finite()?;
        self.check(x.shape())?;
        let shape = x.shape();
        let (h, w, c) = (shape.h, shape.w, shape.c);
        let src = x.data();
        // Y[u, j, ch] = Σ_i B_h[u, i] X[i, j, ch]
        let mut tmp = vec![T::zero(); shape.len()];
        let row_len = w * c;
        for u in 0..h {
            let out = &mut tmp[u * row_len..(u + 1) * row_len];
            for i in 0..h {
                let b = self.rows.at(u, i);
                let inp = &src[i * row_len..(i + 1) * row_len];
                for (o, &v) in out.iter_mut().zip(inp) {
                    *o += b * v;
                }
            }
        }
        // F[u, v, ch] = Σ_j B_w[v, j] Y[u, j, ch]
        let mut dst = vec![T::zero(); shape.len()];
        for u in 0..h {
            let y = &tmp[u * row_len..(u + 1) * row_len];
            let f = &mut dst[u * row_len..(u + 1) * row_len];
            for v in 0..w {
                let out = &mut f[v * c..(v + 1) * c];
                for j in 0..w {
                    let b = self.cols.at(v, j);
                    for (o, &val) in out.iter_mut().zip(&y[j * c..(j + 1) * c]) {
                        *o += b * val;
                    }
                }
            }
        }
        Ok(SpectralTensor::from_parts(shape, dst))
    }

    pub fn inverse(&self, f: &SpectralTensor<T>) -> Result<SpatialTensor<T>> {
        f.ensure_finite()?;
        self.check(f.shape())?;
        let shape = f.shape();
        let (h, w, c) = (shape.h, shape.w, shape.c);
        let src = f.data();
        let row_len = w * c;
        // Y[i, v, ch] = Σ_u B_h[u, i] F[u, v, ch]
        let mut tmp = vec![T::zero(); shape.len()];
        for i in 0..h {
            let out = &mut tmp[i * row_len..(i + 1) * row_len];
            for u in 0..h {
                let b = self.rows.at(u, i);
                let inp = &src[u * row_len..(u + 1) * row_len];
                for (o, &v) in out.iter_mut().zip(inp) {
                    *o += b * v;
                }
            }
        }
        // X[i, j, ch] = Σ_v B_w[v, j] Y[i, v, ch]
        let mut dst = vec![T::zero(); shape.len()];
        for i in 0..h {
            let y = &tmp[i * row_len..(i + 1) * row_len];
            let x = &mut dst[i * row_len..(i + 1) * row_len];
            for j in 0..w {
                let out = &mut x[j * c..(j + 1) * c];
                for v in 0..w {
                    let b = self.cols.at(v, j);
                    for (o, &val) in out.iter_mut().zip(&y[v * c..(v + 1) * c]) {
                        *o += b * val;
                    }
                }
            }
        }
        Ok(SpatialTensor::from_parts(shape, dst))
    }
}

/// Channel-wise orthonormal 2-D DCT-II.
pub fn dct2<T: Real>(x: &SpatialTensor<T>) -> Result<SpectralTensor<T>> {
    Dct2d::new(x.h(), x.w())?.forward(x)
}

/// Channel-wise inverse of [`dct2`].
pub fn idct2<T: Real>(f: &SpectralTensor<T>) -> Result<SpatialTensor<T>> {
    Dct2d::new(f.h(), f.w())?.inverse(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal double-sum evaluation of the 2-D DCT-II, used as an oracle.
    fn brute_force_dct2(x: &SpatialTensor<f64>) -> SpectralTensor<f64> {
        let s = x.shape();
        let (h, w) = (s.h as f64, s.w as f64);
        let m = |k: usize| if k == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        SpectralTensor::from_fn(s, |u, v, ch| {
            let mut acc = 0.0;
            for i in 0..s.h {
                for j in 0..s.w {
                    acc += x.get(i, j, ch)
                        * ((2 * i + 1) as f64 * u as f64 * PI / (2.0 * h)).cos()
                        * ((2 * j + 1) as f64 * v as f64 * PI / (2.0 * w)).cos();
                }
            }
            2.0 / (h * w).sqrt() * m(u) * m(v) * acc
        })
    }

    #[test]
    fn rejects_zero_length() {
        assert!(matches!(dct_matrix::<f32>(0), Err(Error::InvalidSize(_))));
    }

    #[test]
    fn small_bases() {
        let one = dct_matrix::<f64>(1).unwrap();
        assert_eq!(one.basis(), &[1.0]);
        let two = dct_matrix::<f64>(2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [r, r, r, -r];
        for (a, b) in two.basis().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn bases_are_orthonormal() {
        for n in 1..=64 {
            let p = dct_matrix::<f64>(n).unwrap();
            let p32 = dct_matrix::<f32>(n).unwrap();
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..n).map(|i| p.at(a, i) * p.at(b, i)).sum();
                    let dot32: f32 = (0..n).map(|i| p32.at(a, i) * p32.at(b, i)).sum();
                    let id = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - id).abs() < 1e-12);
                    assert!((dot32 - id as f32).abs() < 1e-5);
                }
            }
            let row0 = 1.0 / (n as f64).sqrt();
            assert!((0..n).all(|i| (p.at(0, i) - row0).abs() < 1e-15));
        }
    }

    #[test]
    fn constant_input_has_only_dc() {
        let s = Shape::new(6, 10, 2).unwrap();
        let x = SpatialTensor::<f32>::from_fn(s, |_, _, _| 3.0);
        let f = dct2(&x).unwrap();
        for u in 0..6 {
            for v in 0..10 {
                for ch in 0..2 {
                    let expected = if u == 0 && v == 0 { 3.0 * 60f32.sqrt() } else { 0.0 };
                    assert!((f.get(u, v, ch) - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn delta_on_two_by_two() {
        let x = SpatialTensor::<f64>::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let oracle = brute_force_dct2(&x);
        let f = dct2(&x).unwrap();
        for (&a, &b) in f.data().iter().zip(oracle.data()) {
            assert!((a - 0.5).abs() < 1e-12);
            assert!((b - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(1, 1), (3, 5), (8, 8), (16, 16), (16, 7)] {
            let x = SpatialTensor::<f64>::randn(Shape::new(h, w, 3).unwrap(), &mut rng);
            let oracle = brute_force_dct2(&x);
            let fast = dct2(&x).unwrap();
            assert!(fast.max_abs_diff(&oracle) < 1e-12);
            let fast32 = dct2(&x.cast::<f32>()).unwrap();
            assert!(fast32.cast::<f64>().max_abs_diff(&oracle) < 1e-4);
        }
    }

    #[test]
    fn inverse_of_dc_is_constant() {
        let s = Shape::new(4, 9, 1).unwrap();
        let mut f = SpectralTensor::<f32>::zeros(s);
        f.set(0, 0, 0, 36f32.sqrt());
        let x = idct2(&f).unwrap();
        assert!(x.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn round_trip_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(12, 20, 3).unwrap();
        let x = SpatialTensor::<f32>::randn(s, &mut rng);
        let back = idct2(&dct2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);

        let f1 = SpectralTensor::<f32>::randn(s, &mut rng);
        let f2 = SpectralTensor::<f32>::randn(s, &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let combo = f1.zip_map(&f2, |p, q| a * p + b * q).unwrap();
        let lhs = idct2(&combo).unwrap();
        let rhs = idct2(&f1)
            .unwrap()
            .zip_map(&idct2(&f2).unwrap(), |p, q| a * p + b * q)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = SpatialTensor::<f32>::zeros(Shape::new(2, 2, 1).unwrap());
        x.data_mut()[1] = f32::INFINITY;
        assert!(matches!(dct2(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn channels_transform_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(9, 6, 4).unwrap();
        let x = SpatialTensor::<f32>::randn(s, &mut rng);
        let full = dct2(&x).unwrap();
        for ch in 0..4 {
            let single = SpatialTensor::new(9, 6, 1, x.channel(ch)).unwrap();
            let f = dct2(&single).unwrap();
            assert_eq!(f.data(), full.channel(ch).as_slice());
        }
    }
}
