//! Synthetic palette x shape images, the space-to-depth latent codec, and
//! PPM / FCDT file I/O.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Shape, SpatialTensor};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSize(format!("{width}x{height} image")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                format!("{} bytes", width * height * 3),
                format!("{} bytes", pixels.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Image::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean in 0..=255 units.
    pub fn mean_color(&self) -> [f64; 3] {
        let mut sum = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s as f64 / n)
    }

    /// Fraction of horizontally or vertically adjacent pixel pairs whose
    /// largest channel difference exceeds 48.
    pub fn edge_density(&self) -> f64 {
        let diff = |a: [u8; 3], b: [u8; 3]| (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap_or(0);
        let (mut edges, mut pairs) = (0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if x + 1 < self.width {
                    pairs += 1;
                    edges += (diff(self.get(x, y), self.get(x + 1, y)) > 48) as usize;
                }
                if y + 1 < self.height {
                    pairs += 1;
                    edges += (diff(self.get(x, y), self.get(x, y + 1)) > 48) as usize;
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            edges as f64 / pairs as f64
        }
    }
}

/// Space-to-depth factor of the latent codec.
pub const CODEC_FACTOR: usize = 2;
/// Latent channels produced from an RGB image.
pub const LATENT_CHANNELS: usize = CODEC_FACTOR * CODEC_FACTOR * 3;

/// Lossless latent: each 2x2 pixel block becomes one 12-channel cell,
/// channel `(dy * 2 + dx) * 3 + color`, values `v / 127.5 - 1`.
pub fn encode<T: Real>(img: &Image) -> Result<SpatialTensor<T>> {
    if img.width % CODEC_FACTOR != 0 || img.height % CODEC_FACTOR != 0 {
        return Err(Error::shape(
            "even image dimensions",
            format!("{}x{}", img.width, img.height),
        ));
    }
    let shape = Shape::new(img.height / 2, img.width / 2, LATENT_CHANNELS)?;
    let scale = T::lit(1.0 / 127.5);
    Ok(SpatialTensor::from_fn(shape, |i, j, ch| {
        let (block, color) = (ch / 3, ch % 3);
        let (dy, dx) = (block / 2, block % 2);
        let v = img.get(2 * j + dx, 2 * i + dy)[color];
        T::lit(v as f64) * scale - T::one()
    }))
}

/// Inverse of [`encode`]; values are rounded and clamped to 0..=255.
pub fn decode<T: Real>(z: &SpatialTensor<T>) -> Result<Image> {
    if z.c() != LATENT_CHANNELS {
        return Err(Error::shape(
            format!("{LATENT_CHANNELS} latent channels"),
            z.shape(),
        ));
    }
    let (w, h) = (z.w() * 2, z.h() * 2);
    let mut img = Image::filled(w, h, [0; 3])?;
    for i in 0..z.h() {
        for j in 0..z.w() {
            for block in 0..4 {
                let (dy, dx) = (block / 2, block % 2);
                let mut rgb = [0u8; 3];
                for (color, out) in rgb.iter_mut().enumerate() {
                    let v = z.get(i, j, block * 3 + color).to_f64().unwrap_or(0.0);
                    *out = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
                img.set(2 * j + dx, 2 * i + dy, rgb);
            }
        }
    }
    Ok(img)
}

/// Background gradient family; drives the low-frequency content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Palette {
    Warm,
    Cool,
    Mono,
    Green,
}

impl Palette {
    pub const ALL: [Palette; 4] = [Palette::Warm, Palette::Cool, Palette::Mono, Palette::Green];

    /// Gradient endpoints before jitter.
    pub fn endpoints(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Palette::Warm => ([225.0, 70.0, 35.0], [250.0, 185.0, 70.0]),
            Palette::Cool => ([25.0, 60.0, 170.0], [80.0, 160.0, 235.0]),
            Palette::Mono => ([95.0, 95.0, 95.0], [165.0, 165.0, 165.0]),
            Palette::Green => ([10.0, 45.0, 15.0], [45.0, 110.0, 40.0]),
        }
    }

    /// Shape fill chosen to contrast with the background.
    pub fn foreground(self) -> [f64; 3] {
        match self {
            Palette::Warm => [40.0, 30.0, 110.0],
            Palette::Cool => [240.0, 215.0, 60.0],
            Palette::Mono => [20.0, 20.0, 20.0],
            Palette::Green => [235.0, 120.0, 200.0],
        }
    }

    /// Midpoint of the background gradient.
    pub fn mean_color(self) -> [f64; 3] {
        let (a, b) = self.endpoints();
        [0, 1, 2].map(|i| 0.5 * (a[i] + b[i]))
    }

    pub fn name(self) -> &'static str {
        match self {
            Palette::Warm => "warm",
            Palette::Cool => "cool",
            Palette::Mono => "mono",
            Palette::Green => "green",
        }
    }
}

/// Foreground shape family; drives the high-frequency content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circles,
    Squares,
    Triangles,
    Stripes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circles,
        ShapeKind::Squares,
        ShapeKind::Triangles,
        ShapeKind::Stripes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circles => "circles",
            ShapeKind::Squares => "squares",
            ShapeKind::Triangles => "triangles",
            ShapeKind::Stripes => "stripes",
        }
    }
}

/// Number of label tokens: one per (palette, shape) pair.
pub const VOCAB: usize = Palette::ALL.len() * ShapeKind::ALL.len();

pub fn token(palette: Palette, shape: ShapeKind) -> usize {
    let p = Palette::ALL.iter().position(|&x| x == palette).expect("listed");
    let s = ShapeKind::ALL.iter().position(|&x| x == shape).expect("listed");
    p * ShapeKind::ALL.len() + s
}

pub fn token_parts(token: usize) -> Result<(Palette, ShapeKind)> {
    if token >= VOCAB {
        return Err(Error::IndexOutOfRange {
            index: token,
            max: VOCAB - 1,
        });
    }
    let n = ShapeKind::ALL.len();
    Ok((Palette::ALL[token / n], ShapeKind::ALL[token % n]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub num_images: usize,
    /// Image side in pixels; must be even.
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: 512,
            size: 32,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Data("dataset has no images".into()));
        }
        if self.size < 8 || self.size % 2 != 0 {
            return Err(Error::InvalidSize(format!(
                "image size {} (need even, at least 8)",
                self.size
            )));
        }
        Ok(())
    }

    pub fn token_of(&self, index: usize) -> usize {
        index % VOCAB
    }

    /// Every tenth image by index hash is held out.
    pub fn is_held_out(&self, index: usize) -> bool {
        seed::derive(self.seed, &[0x5117, index as u64]) % 10 == 0
    }

    /// `(train, held_out)` index lists in ascending order.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.num_images).partition(|&i| !self.is_held_out(i))
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} images of {}px, seed {}", self.num_images, self.size, self.seed)
    }
}

fn check_index(spec: &DatasetSpec, index: usize) -> Result<()> {
    spec.validate()?;
    if index >= spec.num_images {
        return Err(Error::IndexOutOfRange {
            index,
            max: spec.num_images - 1,
        });
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn jitter<R: Rng + ?Sized>(rgb: [f64; 3], amount: f64, rng: &mut R) -> [f64; 3] {
    rgb.map(|v| v + rng.random_range(-amount..=amount))
}

fn paint_background<R: Rng + ?Sized>(palette: Palette, size: usize, rng: &mut R) -> Image {
    let (a, b) = palette.endpoints();
    let (a, b) = (jitter(a, 12.0, rng), jitter(b, 12.0, rng));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = size as f64 / 2.0;
    let reach = half * std::f64::consts::SQRT_2;
    let mut img = Image::filled(size, size, [0; 3]).expect("nonzero size");
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - half;
            let py = y as f64 + 0.5 - half;
            let u = (0.5 + 0.5 * (px * dx + py * dy) / reach).clamp(0.0, 1.0);
            img.set(x, y, [0, 1, 2].map(|i| to_u8(a[i] + (b[i] - a[i]) * u)));
        }
    }
    img
}

fn paint_shape<R: Rng + ?Sized>(img: &mut Image, kind: ShapeKind, color: [u8; 3], rng: &mut R) {
    let size = img.width() as f64;
    let cx = rng.random_range(0.15 * size..0.85 * size);
    let cy = rng.random_range(0.15 * size..0.85 * size);
    let r = rng.random_range(0.08 * size..0.16 * size);
    let vertical = rng.random_bool(0.5);
    let inside = |x: f64, y: f64| -> bool {
        let (ux, uy) = (x - cx, y - cy);
        match kind {
            ShapeKind::Circles => ux * ux + uy * uy <= r * r,
            ShapeKind::Squares => ux.abs() <= 0.8 * r && uy.abs() <= 0.8 * r,
            // Upward isosceles triangle with apex at (cx, cy - r).
            ShapeKind::Triangles => uy <= r && uy >= -r && ux.abs() <= 0.5 * (uy + r),
            ShapeKind::Stripes => {
                let along = if vertical { x } else { y };
                ux.abs() <= 1.3 * r && uy.abs() <= 1.3 * r && (along.floor() as i64).rem_euclid(4) < 2
            }
        }
    };
    for y in 0..img.height() {
        for x in 0..img.width() {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.set(x, y, color);
            }
        }
    }
}

/// Image `index` and its token. Pure in `(spec, index)`.
pub fn generate(spec: &DatasetSpec, index: usize) -> Result<(Image, usize)> {
    check_index(spec, index)?;
    let tok = spec.token_of(index);
    let (palette, shape) = token_parts(tok)?;
    let mut rng = seed::rng(spec.seed, &[0xDA7A, index as u64]);
    let mut img = paint_background(palette, spec.size, &mut rng);
    let count = rng.random_range(3..=6);
    for _ in 0..count {
        let color = jitter(palette.foreground(), 15.0, &mut rng).map(to_u8);
        paint_shape(&mut img, shape, color, &mut rng);
    }
    Ok((img, tok))
}

/// The background of image `index` alone, drawn from the same stream.
pub fn generate_background(spec: &DatasetSpec, index: usize) -> Result<Image> {
    check_index(spec, index)?;
    let (palette, _) = token_parts(spec.token_of(index))?;
    let mut rng = seed::rng(spec.seed, &[0xDA7A, index as u64]);
    Ok(paint_background(palette, spec.size, &mut rng))
}

/// Encoded latents and tokens for `indices`.
pub fn encode_all(spec: &DatasetSpec, indices: &[usize]) -> Result<Vec<(SpatialTensor<f32>, usize)>> {
    indices
        .iter()
        .map(|&i| {
            let (img, tok) = generate(spec, i)?;
            Ok((encode(&img)?, tok))
        })
        .collect()
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Palette::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown palette `{s}`")))
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start as u64, format!("{what} out of range")))
    }
}

/// Parses binary PPM (P6, maxval 255).
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "expected magic `P6`"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let max_at = {
        r.skip_space();
        r.pos
    };
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            max_at as u64,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(r.pos as u64, "expected whitespace after maxval"));
    }
    let start = r.pos + 1;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("empty {width}x{height} image")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(2, "image dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated pixel data: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(Error::format((start + need) as u64, "trailing bytes after pixel data"));
    }
    Image::new(width, height, bytes[start..].to_vec())
}

pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    parse_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ppm_bytes(img))?;
    Ok(())
}

/// Dense row-major f32 array as stored in FCDT files.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl RawTensor {
    pub fn into_spatial(self) -> Result<SpatialTensor<f32>> {
        match self.dims[..] {
            [h, w, c] => SpatialTensor::new(h, w, c, self.values),
            _ => Err(Error::shape("rank 3 (h, w, c)", format!("rank {}", self.dims.len()))),
        }
    }
}

impl From<&SpatialTensor<f32>> for RawTensor {
    fn from(t: &SpatialTensor<f32>) -> Self {
        RawTensor {
            dims: vec![t.h(), t.w(), t.c()],
            values: t.data().to_vec(),
        }
    }
}

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            )),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"FCDT";

pub fn tensor_bytes(t: &RawTensor) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_tensor(bytes: &[u8]) -> Result<RawTensor> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::format(0, "expected magic `FCDT`"));
    }
    let rank = cur.u32("rank")? as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        dims.push(cur.u32("dimension")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(8, "dimension product overflows"))?;
    let expected = count.saturating_mul(4);
    let have = bytes.len() - cur.pos;
    if have != expected {
        return Err(Error::format(
            cur.pos as u64,
            format!("dimension product {count} needs {expected} value bytes, found {have}"),
        ));
    }
    let values = cur.f32s(count, "values")?;
    Ok(RawTensor { dims, values })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<RawTensor> {
    parse_tensor(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &RawTensor) -> Result<()> {
    let count: usize = t.dims.iter().product();
    if count != t.values.len() {
        return Err(Error::shape(format!("{count} values"), format!("{} values", t.values.len())));
    }
    fs::write(path, tensor_bytes(t))?;
    Ok(())
}
