//! Latent-grid tensors in channels-last (h, w, c) row-major layout.
//!
//! [`SpatialTensor`] holds latents, noised latents and control signals;
//! [`SpectralTensor`] holds their channel-wise DCT coefficients, indexed by
//! frequency coordinates (u, v) with (0, 0) at the top-left.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the working width, `f64` is used by
/// oracle and gradient-check tests.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const BITS: u32;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strides and dimensions must describe memory inside the three slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        StandardNormal.sample(rng)
    }
}

/// Grid dimensions shared by spatial and spectral tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidSize(format!("{h}x{w}x{c}")));
        }
        Ok(Shape { h, w, c })
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest frequency level `u + v` on this grid.
    pub fn max_level(&self) -> usize {
        self.h + self.w - 2
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, ch: usize) -> usize {
        (i * self.w + j) * self.c + ch
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

macro_rules! grid_tensor {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = f32> {
            shape: Shape,
            data: Vec<T>,
        }

        impl<T: Real> $name<T> {
            /// Validating constructor: rejects empty shapes, length mismatch and
            /// non-finite values.
            pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
                let shape = Shape::new(h, w, c)?;
                if data.len() != shape.len() {
                    return Err(Error::shape(
                        format!("{} values", shape.len()),
                        format!("{} values", data.len()),
                    ));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite($what));
                }
                Ok($name { shape, data })
            }

            pub fn zeros(shape: Shape) -> Self {
                $name {
                    shape,
                    data: vec![T::zero(); shape.len()],
                }
            }

            pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
                let mut data = Vec::with_capacity(shape.len());
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        for ch in 0..shape.c {
                            data.push(f(i, j, ch));
                        }
                    }
                }
                $name { shape, data }
            }

            pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
                debug_assert_eq!(shape.len(), data.len());
                $name { shape, data }
            }

            /// Standard-normal entries drawn in storage order.
            pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
                let data = (0..shape.len()).map(|_| T::sample_normal(rng)).collect();
                $name { shape, data }
            }

            pub fn shape(&self) -> Shape {
                self.shape
            }

            pub fn h(&self) -> usize {
                self.shape.h
            }

            pub fn w(&self) -> usize {
                self.shape.w
            }

            pub fn c(&self) -> usize {
                self.shape.c
            }

            pub fn data(&self) -> &[T] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [T] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<T> {
                self.data
            }

            #[inline]
            pub fn get(&self, i: usize, j: usize, ch: usize) -> T {
                self.data[self.shape.index(i, j, ch)]
            }

            #[inline]
            pub fn set(&mut self, i: usize, j: usize, ch: usize, v: T) {
                let idx = self.shape.index(i, j, ch);
                self.data[idx] = v;
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            pub(crate) fn ensure_finite(&self) -> Result<()> {
                if self.is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite($what))
                }
            }

            pub(crate) fn ensure_shape(&self, other: Shape) -> Result<()> {
                if self.shape == other {
                    Ok(())
                } else {
                    Err(Error::shape(other, self.shape))
                }
            }

            /// Sum of squared entries.
            pub fn energy(&self) -> T {
                self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
            }

            pub fn max_abs_diff(&self, other: &Self) -> T {
                self.data
                    .iter()
                    .zip(&other.data)
                    .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
            }

            /// One channel as an h x w row-major plane.
            pub fn channel(&self, ch: usize) -> Vec<T> {
                self.data.iter().skip(ch).step_by(self.shape.c).copied().collect()
            }

            pub fn scale(&self, s: T) -> Self {
                $name {
                    shape: self.shape,
                    data: self.data.iter().map(|&v| v * s).collect(),
                }
            }

            pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
                other.ensure_shape(self.shape)?;
                Ok($name {
                    shape: self.shape,
                    data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
                })
            }

            pub fn cast<U: Real>(&self) -> $name<U> {
                $name {
                    shape: self.shape,
                    data: self
                        .data
                        .iter()
                        .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                        .collect(),
                }
            }
        }
    };
}

grid_tensor!(SpatialTensor, "spatial tensor");
grid_tensor!(SpectralTensor, "spectral tensor");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            SpatialTensor::<f32>::new(0, 2, 1, vec![]),
            Err(Error::InvalidSize(_))
        ));
        assert!(matches!(
            SpatialTensor::<f32>::new(2, 2, 1, vec![0.0; 3]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            SpatialTensor::<f32>::new(1, 1, 1, vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn layout_is_channels_last() {
        let t = SpatialTensor::<f32>::from_fn(Shape::new(2, 3, 2).unwrap(), |i, j, ch| {
            (i * 100 + j * 10 + ch) as f32
        });
        assert_eq!(t.data()[..4], [0.0, 1.0, 10.0, 11.0]);
        assert_eq!(t.get(1, 2, 1), 121.0);
        assert_eq!(t.channel(1), vec![1.0, 11.0, 21.0, 101.0, 111.0, 121.0]);
    }
}
