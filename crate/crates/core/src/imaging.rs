//! Planar RGB images and the pixel-level transforms used both to imprint
//! generator artifacts and to perturb test images.

use crate::error::{Error, Result};

/// Channel-major (`C×H×W`) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `size×size` window with its top-left corner at `(top, left)`.
    /// Regions outside the image read as zero.
    pub fn crop(&self, top: isize, left: isize, size: usize) -> Image {
        let mut out = Image::filled(self.channels, size, size, 0.0);
        for c in 0..self.channels {
            for y in 0..size {
                let sy = top + y as isize;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..size {
                    let sx = left + x as isize;
                    if sx < 0 || sx >= self.width as isize {
                        continue;
                    }
                    *out.at_mut(c, y, x) = self.at(c, sy as usize, sx as usize);
                }
            }
        }
        out
    }

    /// Centered `size×size` crop, zero-padded when the image is smaller.
    pub fn center_crop(&self, size: usize) -> Image {
        let top = (self.height as isize - size as isize) / 2;
        let left = (self.width as isize - size as isize) / 2;
        self.crop(top, left, size)
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn convolve_separable(img: &Image, kernel: &[f64]) -> Image {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0f64; img.data.len()];
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - r, w);
                    s += kv * plane[y * w + sx] as f64;
                }
                tmp[(c * h + y) * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - r, h);
                    s += kv * tmp[(c * h + sy) * w + x];
                }
                *out.at_mut(c, y, x) = s as f32;
            }
        }
    }
    out
}

/// Normalized Gaussian taps over radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with reflect padding; `σ = 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    Ok(convolve_separable(img, &gaussian_kernel(sigma)))
}

/// `size×size` box filter with reflect padding.
pub fn box_blur(img: &Image, size: usize) -> Image {
    let size = size.max(1) | 1;
    convolve_separable(img, &vec![1.0 / size as f64; size])
}

/// Average-pools by `factor` then upsamples back with nearest neighbour.
pub fn nearest_resample(img: &Image, factor: usize) -> Image {
    let mut out = img.clone();
    let (h, w) = (img.height, img.width);
    for c in 0..img.channels {
        for by in (0..h).step_by(factor) {
            for bx in (0..w).step_by(factor) {
                let (ey, ex) = ((by + factor).min(h), (bx + factor).min(w));
                let mut s = 0f64;
                for y in by..ey {
                    for x in bx..ex {
                        s += img.at(c, y, x) as f64;
                    }
                }
                let m = (s / ((ey - by) * (ex - bx)) as f64) as f32;
                for y in by..ey {
                    for x in bx..ex {
                        *out.at_mut(c, y, x) = m;
                    }
                }
            }
        }
    }
    out
}

/// Standard JPEG luminance quantization table (quality 50), row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for `quality` with the usual IJG mapping:
/// `s = 5000/q` below 50, else `200 − 2q`; entries `⌊(b·s + 50)/100⌋`
/// clamped to `[1, 255]`.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Domain(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_QUANT) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Block-DCT quantization round trip applied per channel: 8×8 orthonormal
/// DCT-II of level-shifted 8-bit values, quantize/dequantize with the
/// scaled luminance table, inverse DCT, clamp to `[0, 1]`. Partial edge
/// blocks are filled by edge replication and cropped back.
pub fn jpeg_like_compress(img: &Image, quality: u32) -> Result<Image> {
    let q = quant_table(quality)?;
    let basis = dct_basis();
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for c in 0..img.channels {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        *v = img.at(c, sy, sx) as f64 * 255.0 - 128.0;
                    }
                }
                // rows then columns
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y][u] = (0..8).map(|x| basis[u][x] * block[y][x]).sum();
                    }
                }
                for v in 0..8 {
                    for u in 0..8 {
                        let f: f64 = (0..8).map(|y| basis[v][y] * tmp[y][u]).sum();
                        let step = q[v * 8 + u];
                        coef[v][u] = (f / step).round() * step;
                    }
                }
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y][u] = (0..8).map(|v| basis[v][y] * coef[v][u]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        block[y][x] = (0..8).map(|u| basis[u][x] * tmp[y][u]).sum();
                    }
                }
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        *out.at_mut(c, by + y, bx + x) = (((block[y][x] + 128.0) / 255.0).clamp(0.0, 1.0)) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}
