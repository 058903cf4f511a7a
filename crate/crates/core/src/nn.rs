//! Layer primitives with hand-written backward passes.
//!
//! Feature maps are channels-last [`SpatialTensor`]s. Convolutions use
//! zero "same" padding (`k / 2`) and are evaluated as im2col followed by a
//! GEMM against a `[k][k][cin][cout]` kernel.

use rand::Rng;

use crate::tensor::{Real, Shape, SpatialTensor};

/// `c (m x n) = a (m x k) · b (k x n)`, optionally transposed operands and
/// accumulation into `c`. All buffers are dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reached by these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub(crate) fn relu_in_place<T: Real>(xs: &mut [T]) {
    for x in xs {
        *x = relu(*x);
    }
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub(crate) fn relu_backward<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Adds `bias[ch]` to every pixel.
pub(crate) fn add_channel_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for px in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates per-channel sums of `x` into `out`.
pub(crate) fn channel_sums<T: Real>(x: &[T], out: &mut [T]) {
    for px in x.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
}

pub(crate) fn kaiming<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let gain = T::lit((2.0 / fan_in as f64).sqrt());
    (0..len).map(|_| T::sample_normal(rng) * gain).collect()
}

/// 2-D convolution with square kernel and same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub ksize: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `[ksize][ksize][cin][cout]`, row-major.
    pub kernel: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(ksize: usize, cin: usize, cout: usize, stride: usize, with_bias: bool) -> Self {
        Conv2d {
            ksize,
            cin,
            cout,
            stride,
            kernel: vec![T::zero(); ksize * ksize * cin * cout],
            bias: with_bias.then(|| vec![T::zero(); cout]),
        }
    }

    /// He-normal kernel, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        ksize: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(ksize, cin, cout, stride, with_bias);
        let fan_in = ksize * ksize * cin;
        conv.kernel = kaiming(conv.kernel.len(), fan_in, rng);
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.ksize, self.cin, self.cout, self.stride, self.bias.is_some())
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.ksize, self.ksize, self.cin, self.cout]
    }

    fn patch_len(&self) -> usize {
        self.ksize * self.ksize * self.cin
    }

    pub fn out_shape(&self, input: Shape) -> Shape {
        let pad = self.ksize / 2;
        let oh = (input.h + 2 * pad - self.ksize) / self.stride + 1;
        let ow = (input.w + 2 * pad - self.ksize) / self.stride + 1;
        Shape {
            h: oh,
            w: ow,
            c: self.cout,
        }
    }

    fn im2col(&self, x: &SpatialTensor<T>, out: Shape) -> Vec<T> {
        let s = x.shape();
        debug_assert_eq!(s.c, self.cin);
        if self.ksize == 1 && self.stride == 1 {
            return x.data().to_vec();
        }
        let pad = self.ksize as isize / 2;
        let plen = self.patch_len();
        let mut cols = vec![T::zero(); out.h * out.w * plen];
        let src = x.data();
        for oi in 0..out.h {
            for oj in 0..out.w {
                let row = &mut cols[(oi * out.w + oj) * plen..][..plen];
                for ky in 0..self.ksize {
                    let ii = (oi * self.stride) as isize + ky as isize - pad;
                    if ii < 0 || ii >= s.h as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let jj = (oj * self.stride) as isize + kx as isize - pad;
                        if jj < 0 || jj >= s.w as isize {
                            continue;
                        }
                        let from = (ii as usize * s.w + jj as usize) * s.c;
                        let to = (ky * self.ksize + kx) * self.cin;
                        row[to..to + self.cin].copy_from_slice(&src[from..from + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], input: Shape, out: Shape) -> SpatialTensor<T> {
        if self.ksize == 1 && self.stride == 1 {
            return SpatialTensor::from_parts(input, cols.to_vec());
        }
        let pad = self.ksize as isize / 2;
        let plen = self.patch_len();
        let mut dx = SpatialTensor::zeros(input);
        let dst = dx.data_mut();
        for oi in 0..out.h {
            for oj in 0..out.w {
                let row = &cols[(oi * out.w + oj) * plen..][..plen];
                for ky in 0..self.ksize {
                    let ii = (oi * self.stride) as isize + ky as isize - pad;
                    if ii < 0 || ii >= input.h as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let jj = (oj * self.stride) as isize + kx as isize - pad;
                        if jj < 0 || jj >= input.w as isize {
                            continue;
                        }
                        let to = (ii as usize * input.w + jj as usize) * input.c;
                        let from = (ky * self.ksize + kx) * self.cin;
                        for (d, &g) in dst[to..to + self.cin].iter_mut().zip(&row[from..from + self.cin]) {
                            *d += g;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by [`Self::backward`].
    pub fn forward(&self, x: &SpatialTensor<T>) -> (SpatialTensor<T>, Vec<T>) {
        let out_shape = self.out_shape(x.shape());
        let cols = self.im2col(x, out_shape);
        let pixels = out_shape.h * out_shape.w;
        let mut out = vec![T::zero(); out_shape.len()];
        gemm(pixels, self.patch_len(), self.cout, &cols, false, &self.kernel, false, &mut out, false);
        if let Some(bias) = &self.bias {
            add_channel_bias(&mut out, bias);
        }
        (SpatialTensor::from_parts(out_shape, out), cols)
    }

    pub fn apply(&self, x: &SpatialTensor<T>) -> SpatialTensor<T> {
        self.forward(x).0
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cols: &[T],
        input: Shape,
        d_out: &SpatialTensor<T>,
        grad: Option<&mut Conv2d<T>>,
        need_input_grad: bool,
    ) -> Option<SpatialTensor<T>> {
        let out_shape = d_out.shape();
        let pixels = out_shape.h * out_shape.w;
        let plen = self.patch_len();
        if let Some(g) = grad {
            gemm(plen, pixels, self.cout, cols, true, d_out.data(), false, &mut g.kernel, true);
            if let Some(gb) = g.bias.as_mut() {
                channel_sums(d_out.data(), gb);
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut d_cols = vec![T::zero(); pixels * plen];
        gemm(pixels, self.cout, plen, d_out.data(), false, &self.kernel, true, &mut d_cols, false);
        Some(self.col2im(&d_cols, input, out_shape))
    }
}

/// Dense `out x in` affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_out][fan_in]`.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        Linear {
            fan_in,
            fan_out,
            weight: vec![T::zero(); fan_in * fan_out],
            bias: with_bias.then(|| vec![T::zero(); fan_out]),
        }
    }

    pub fn kaiming<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, with_bias: bool, rng: &mut R) -> Self {
        let mut l = Self::zeros(fan_in, fan_out, with_bias);
        l.weight = kaiming(l.weight.len(), fan_in, rng);
        l
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in, self.fan_out, self.bias.is_some())
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.fan_in);
        (0..self.fan_out)
            .map(|o| {
                let row = &self.weight[o * self.fan_in..(o + 1) * self.fan_in];
                let dot = row.iter().zip(x).fold(T::zero(), |acc, (&w, &v)| acc + w * v);
                dot + self.bias.as_ref().map_or(T::zero(), |b| b[o])
            })
            .collect()
    }

    /// Adds `self.forward(x)` without bias into `out`.
    pub fn forward_into(&self, x: &[T], out: &mut [T]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.fan_in..(o + 1) * self.fan_in];
            *y += row.iter().zip(x).fold(T::zero(), |acc, (&w, &v)| acc + w * v);
        }
    }

    /// Accumulates `d_out ⊗ x` (and bias) into `grad`, adds `Wᵀ d_out` into
    /// `d_x` when given.
    pub fn backward(&self, x: &[T], d_out: &[T], grad: Option<&mut Linear<T>>, d_x: Option<&mut [T]>) {
        if let Some(g) = grad {
            for (o, &d) in d_out.iter().enumerate() {
                let row = &mut g.weight[o * self.fan_in..(o + 1) * self.fan_in];
                for (w, &v) in row.iter_mut().zip(x) {
                    *w += d * v;
                }
            }
            if let Some(gb) = g.bias.as_mut() {
                for (b, &d) in gb.iter_mut().zip(d_out) {
                    *b += d;
                }
            }
        }
        if let Some(dx) = d_x {
            for (o, &d) in d_out.iter().enumerate() {
                let row = &self.weight[o * self.fan_in..(o + 1) * self.fan_in];
                for (g, &w) in dx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<T: Real>(x: &SpatialTensor<T>) -> SpatialTensor<T> {
    let s = x.shape();
    let out = Shape {
        h: s.h * 2,
        w: s.w * 2,
        c: s.c,
    };
    let mut data = Vec::with_capacity(out.len());
    for i in 0..out.h {
        for j in 0..out.w {
            let from = ((i / 2) * s.w + j / 2) * s.c;
            data.extend_from_slice(&x.data()[from..from + s.c]);
        }
    }
    SpatialTensor::from_parts(out, data)
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<T: Real>(d_out: &SpatialTensor<T>) -> SpatialTensor<T> {
    let s = d_out.shape();
    let small = Shape {
        h: s.h / 2,
        w: s.w / 2,
        c: s.c,
    };
    let mut dx = SpatialTensor::zeros(small);
    let dst = dx.data_mut();
    for i in 0..s.h {
        for j in 0..s.w {
            let to = ((i / 2) * small.w + j / 2) * s.c;
            let from = (i * s.w + j) * s.c;
            for (d, &g) in dst[to..to + s.c].iter_mut().zip(&d_out.data()[from..from + s.c]) {
                *d += g;
            }
        }
    }
    dx
}
