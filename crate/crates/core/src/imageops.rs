//! Raster types and the classical image primitives used by the loss, the
//! boundary fusion step and the edge-detector baselines.

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::dim("ImageRgb::new", (h, w, 3), data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        Self {
            h,
            w,
            data: rgb.iter().copied().cycle().take(h * w * 3).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Single-channel raster with nominal range [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl ImageGray {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::dim("ImageGray::new", (h, w), pixels.len()));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            pixels: vec![v; h * w],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            h: self.h,
            w: self.w,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// 8-bit quantization with clamping to [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::dim("BinaryMask::new", (h, w), bits.len()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_gray(&self) -> ImageGray {
        ImageGray {
            h: self.h,
            w: self.w,
            pixels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub fn to_grayscale(img: &ImageRgb) -> ImageGray {
    let pixels = img
        .pixels()
        .map(|[r, g, b]| ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32)
        .collect();
    ImageGray {
        h: img.h,
        w: img.w,
        pixels,
    }
}

/// Min-max stretch to [0, 1]; a constant image maps to all zeros.
pub fn normalize_minmax(img: &ImageGray) -> ImageGray {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return ImageGray::filled(img.h, img.w, 0.0);
    }
    let span = (hi - lo) as f64;
    img.map(|v| ((v - lo) as f64 / span) as f32)
}

pub const OTSU_BINS: usize = 256;

/// Histogram bin of a pixel: bin `k` holds `((k)/256, (k+1)/256]`, with
/// everything at or below zero in bin 0. This keeps "bin ≤ k" equivalent to
/// "pixel ≤ (k+1)/256".
fn otsu_bin(p: f32) -> usize {
    let scaled = (p as f64 * OTSU_BINS as f64).ceil() as i64 - 1;
    scaled.clamp(0, OTSU_BINS as i64 - 1) as usize
}

/// Otsu's threshold on a 256-bin histogram over [0, 1].
///
/// Returns the bin upper edge `t` that maximizes `w0·w1·(μ0−μ1)²` for the
/// classes `{p ≤ t}` and `{p > t}`, preferring the smallest `t` on ties.
pub fn otsu_threshold(img: &ImageGray) -> Result<f32> {
    let mut count = [0u64; OTSU_BINS];
    let mut sum = [0f64; OTSU_BINS];
    for &p in &img.pixels {
        let b = otsu_bin(p);
        count[b] += 1;
        sum[b] += p as f64;
    }
    if count.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateImage(
            "Otsu threshold needs pixels in at least two histogram bins".into(),
        ));
    }
    let total = img.pixels.len() as f64;
    let total_sum: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0f64, 0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..OTSU_BINS - 1 {
        n0 += count[k] as f64;
        s0 += sum[k];
        let n1 = total - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let (w0, w1) = (n0 / total, n1 / total);
        let (mu0, mu1) = (s0 / n0, (total_sum - s0) / n1);
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(((best.1 + 1) as f64 / OTSU_BINS as f64) as f32)
}

/// `1` where `p > t`.
pub fn binarize(img: &ImageGray, t: f32) -> BinaryMask {
    BinaryMask {
        h: img.h,
        w: img.w,
        bits: img.pixels.iter().map(|&p| p > t).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedKernel {
    Laplacian,
    SobelX,
    SobelY,
}

impl FixedKernel {
    pub const fn weights(self) -> [[f32; 3]; 3] {
        match self {
            FixedKernel::Laplacian => [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
            FixedKernel::SobelX => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            FixedKernel::SobelY => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
        }
    }
}

/// 3×3 correlation with zero padding; output has the input's size.
pub fn convolve_fixed(img: &ImageGray, kernel: FixedKernel) -> ImageGray {
    let k = kernel.weights();
    let (h, w) = (img.h as isize, img.w as isize);
    let mut out = vec![0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (ky, row) in k.iter().enumerate() {
                let sy = y + ky as isize - 1;
                if sy < 0 || sy >= h {
                    continue;
                }
                for (kx, &kv) in row.iter().enumerate() {
                    let sx = x + kx as isize - 1;
                    if sx < 0 || sx >= w || kv == 0.0 {
                        continue;
                    }
                    acc += kv as f64 * img.pixels[(sy * w + sx) as usize] as f64;
                }
            }
            out[(y * w + x) as usize] = acc as f32;
        }
    }
    ImageGray {
        h: img.h,
        w: img.w,
        pixels: out,
    }
}

/// Sobel gradient magnitude `sqrt(gx² + gy²)`.
pub fn gradient_magnitude(img: &ImageGray) -> ImageGray {
    let gx = convolve_fixed(img, FixedKernel::SobelX);
    let gy = convolve_fixed(img, FixedKernel::SobelY);
    let pixels = gx
        .pixels
        .iter()
        .zip(&gy.pixels)
        .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt() as f32)
        .collect();
    ImageGray {
        h: img.h,
        w: img.w,
        pixels,
    }
}

/// Population standard deviation of the pixel intensities.
pub fn rms_contrast(img: &ImageGray) -> f64 {
    crate::autograd::population_std(&img.pixels)
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RANGE: f64 = 1.0;

/// Side of the Gaussian window used for an `h × w` image: 11, shrunk to the
/// largest odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let s = SSIM_WINDOW.min(h).min(w);
    if s.is_multiple_of(2) {
        s.saturating_sub(1).max(1)
    } else {
        s
    }
}

/// Normalized 2-D Gaussian window, row-major `size × size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g1: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &g1 {
        for b in &g1 {
            out.push(a * b);
        }
    }
    out
}

/// Mean structural similarity over all fully-contained Gaussian windows.
pub fn ssim(a: &ImageGray, b: &ImageGray) -> Result<f64> {
    ssim_terms(a, b).map(|(full, _)| full)
}

/// Mean SSIM and mean contrast-structure term (SSIM without the luminance
/// factor).
fn ssim_terms(a: &ImageGray, b: &ImageGray) -> Result<(f64, f64)> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::dim("ssim", (a.h, a.w), (b.h, b.w)));
    }
    if a.is_empty() {
        return Err(Error::Argument("ssim of an empty image".into()));
    }
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let size = ssim_window_size(a.h, a.w);
    let win = gaussian_window(size, SSIM_SIGMA);
    let (oh, ow) = (a.h - size + 1, a.w - size + 1);
    let (mut total, mut total_cs) = (0f64, 0f64);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0f64, 0f64, 0f64, 0f64, 0f64);
            for ky in 0..size {
                for kx in 0..size {
                    let g = win[ky * size + kx];
                    let i = (y + ky) * a.w + x + kx;
                    let (va, vb) = (a.pixels[i] as f64, b.pixels[i] as f64);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            total += cs * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            total_cs += cs;
        }
    }
    let windows = (oh * ow) as f64;
    Ok((total / windows, total_cs / windows))
}

pub fn cross_section_profile(img: &ImageGray, row: usize) -> Result<Vec<f32>> {
    if row >= img.h {
        return Err(Error::Argument(format!("row {row} outside image of height {}", img.h)));
    }
    Ok(img.pixels[row * img.w..(row + 1) * img.w].to_vec())
}
