//! Chromaticity-space infection detection.
//!
//! Pixels are mapped to hue/saturation/intensity, a per-image Gaussian model
//! is fit over (H, S), and pixels whose squared Mahalanobis distance exceeds
//! the 2-dof chi-square critical value are flagged. Flagged pixels are grouped
//! into connected components. K-means and a fixed HSV band-pass are provided
//! as baselines.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{BinaryMask, ImageRgb};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_MIN_BLOB: usize = 200;
/// Diagonal ridge added to an ill-conditioned covariance before inversion.
pub const COV_RIDGE: f64 = 1e-6;
pub const MAX_CONDITION: f64 = 1e8;
pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsvPixel {
    /// Degrees in [0, 360).
    pub h: f64,
    pub s: f64,
    /// Mean of the three channels, in [0, 255].
    pub v: f64,
}

pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> HsvPixel {
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let sum = rf + gf + bf;
    let v = sum / 3.0;
    if r == g && g == b {
        return HsvPixel { h: 0.0, s: 0.0, v };
    }
    let num = 0.5 * ((rf - gf) + (rf - bf));
    let den = ((rf - gf).powi(2) + (rf - bf) * (gf - bf)).sqrt();
    let theta = (num / den).clamp(-1.0, 1.0).acos().to_degrees();
    let mut h = if b <= g { theta } else { 360.0 - theta };
    if h >= 360.0 {
        h -= 360.0;
    }
    let s = 1.0 - 3.0 * rf.min(gf).min(bf) / sum;
    HsvPixel { h, s, v }
}

/// (H, S) feature of every pixel in row-major order.
pub fn hs_features(img: &ImageRgb) -> Vec<[f64; 2]> {
    img.pixels()
        .map(|[r, g, b]| {
            let p = rgb_to_hsv(r, g, b);
            [p.h, p.s]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisModel {
    pub mean: [f64; 2],
    /// Sample covariance with denominator n − 1.
    pub cov: [[f64; 2]; 2],
    pub cov_inv: [[f64; 2]; 2],
    pub n: usize,
    /// Ridge that was added to the diagonal before inversion (0 when none).
    pub ridge: f64,
}

fn condition_number(c: &[[f64; 2]; 2]) -> f64 {
    let tr = c[0][0] + c[1][1];
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (hi, lo) = (tr / 2.0 + disc, tr / 2.0 - disc);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

impl MahalanobisModel {
    pub fn fit(points: &[[f64; 2]]) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(Error::Argument(format!("mahalanobis fit needs at least 3 pixels, got {n}")));
        }
        let nf = n as f64;
        let origin = points[0];
        let mut shift = [0.0; 2];
        for p in points {
            shift[0] += p[0] - origin[0];
            shift[1] += p[1] - origin[1];
        }
        let mean = [origin[0] + shift[0] / nf, origin[1] + shift[1] / nf];
        let mut cov = [[0.0; 2]; 2];
        for p in points {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            cov[0][0] += d[0] * d[0];
            cov[0][1] += d[0] * d[1];
            cov[1][1] += d[1] * d[1];
        }
        cov[0][0] /= nf - 1.0;
        cov[0][1] /= nf - 1.0;
        cov[1][1] /= nf - 1.0;
        cov[1][0] = cov[0][1];

        let ridge = if condition_number(&cov) > MAX_CONDITION { COV_RIDGE } else { 0.0 };
        let a = [[cov[0][0] + ridge, cov[0][1]], [cov[1][0], cov[1][1] + ridge]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        if !(det > 0.0 && det.is_finite()) {
            return Err(Error::DegenerateImage(format!("covariance is singular (det {det:e})")));
        }
        let cov_inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        Ok(Self {
            mean,
            cov,
            cov_inv,
            n,
            ridge,
        })
    }

    /// Squared Mahalanobis distance of `x` from the fitted distribution.
    pub fn d2(&self, x: [f64; 2]) -> f64 {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let m = &self.cov_inv;
        let q = d[0] * (m[0][0] * d[0] + m[0][1] * d[1]) + d[1] * (m[1][0] * d[0] + m[1][1] * d[1]);
        q.max(0.0)
    }
}

/// Critical value of the chi-square distribution with 2 degrees of freedom
/// at significance `alpha`.
pub fn chi2_threshold(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(-2.0 * alpha.ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelDetection {
    pub mask: BinaryMask,
    /// Row-major D² of every pixel.
    pub d2: Vec<f64>,
    pub model: MahalanobisModel,
    pub threshold: f64,
}

/// Flags pixels whose D² under the image's own (H, S) model is strictly
/// above the chi-square critical value.
pub fn detect_anomalous_pixels(img: &ImageRgb, alpha: f64) -> Result<PixelDetection> {
    let threshold = chi2_threshold(alpha)?;
    if img.is_empty() {
        return Err(Error::Argument("image is empty".into()));
    }
    let feats = hs_features(img);
    let model = MahalanobisModel::fit(&feats)?;
    let d2: Vec<f64> = feats.iter().map(|&f| model.d2(f)).collect();
    let mask = BinaryMask::new(img.h, img.w, d2.iter().map(|&d| d > threshold).collect())?;
    Ok(PixelDetection {
        mask,
        d2,
        model,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(Error::Argument(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

impl From<Connectivity> for u32 {
    fn from(c: Connectivity) -> u32 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based rank in the sorted component list.
    pub id: usize,
    pub pixels: usize,
    /// `[x, y, w, h]`.
    pub bbox: [usize; 4],
    /// `[x, y]`.
    pub centroid: [f64; 2],
    pub mean_d2: f64,
    pub max_d2: f64,
}

struct UnionFind(Vec<u32>);

impl UnionFind {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.0[a as usize] != a {
            let next = self.0[a as usize];
            self.0[a as usize] = self.0[next as usize];
            a = next;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi as usize] = lo;
        }
    }
}

/// Maximal connected foreground regions as row-major pixel index lists,
/// largest first, ties broken by the top-left-most first pixel.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> Vec<Vec<usize>> {
    let (h, w) = (mask.h, mask.w);
    let mut uf = UnionFind((0..(h * w) as u32).collect());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let i = (y * w + x) as u32;
            if x > 0 && mask.get(x - 1, y) {
                uf.union(i, i - 1);
            }
            if y > 0 {
                let up = i - w as u32;
                if mask.get(x, y - 1) {
                    uf.union(i, up);
                }
                if conn == Connectivity::Eight {
                    if x > 0 && mask.get(x - 1, y - 1) {
                        uf.union(i, up - 1);
                    }
                    if x + 1 < w && mask.get(x + 1, y - 1) {
                        uf.union(i, up + 1);
                    }
                }
            }
        }
    }
    let mut groups: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, &on) in mask.bits.iter().enumerate() {
        if on {
            groups.entry(uf.find(i as u32)).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

/// Labels the mask, drops regions smaller than `min_size` and summarizes the
/// rest. `d2` (row-major, same size as the mask) fills the D² statistics;
/// without it they are 0.
pub fn connected_components(
    mask: &BinaryMask,
    conn: Connectivity,
    min_size: usize,
    d2: Option<&[f64]>,
) -> Result<Vec<Component>> {
    if let Some(d) = d2 {
        if d.len() != mask.h * mask.w {
            return Err(Error::dim("connected_components", (mask.h, mask.w), d.len()));
        }
    }
    let w = mask.w;
    let comps = label_components(mask, conn)
        .into_iter()
        .filter(|px| px.len() >= min_size.max(1))
        .enumerate()
        .map(|(k, px)| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let (mut sx, mut sy, mut sd, mut md) = (0f64, 0f64, 0f64, 0f64);
            for &i in &px {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                sx += x as f64;
                sy += y as f64;
                if let Some(d) = d2 {
                    sd += d[i];
                    md = md.max(d[i]);
                }
            }
            let n = px.len() as f64;
            Component {
                id: k + 1,
                pixels: px.len(),
                bbox: [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
                centroid: [sx / n, sy / n],
                mean_d2: sd / n,
                max_d2: md,
            }
        })
        .collect();
    Ok(comps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster index of every pixel, row-major.
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cluster_mask(&self, h: usize, w: usize, cluster: usize) -> Result<BinaryMask> {
        BinaryMask::new(h, w, self.labels.iter().map(|&l| l == cluster).collect())
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's algorithm on arbitrary 2-D points, initialized from `k` distinct
/// points drawn with `seed`.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeansResult> {
    let mut distinct: Vec<[f64; 2]> = points.to_vec();
    distinct.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    distinct.dedup_by(|a, b| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
    if k == 0 || k > distinct.len() {
        return Err(Error::Argument(format!(
            "k = {k} must be between 1 and the number of distinct pixels ({})",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<[f64; 2]> = sample(&mut rng, distinct.len(), k).iter().map(|i| distinct[i]).collect();
    let mut labels = vec![0usize; points.len()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        for (l, &p) in labels.iter_mut().zip(points) {
            *l = (0..k)
                .min_by(|&a, &b| dist2(p, centroids[a]).total_cmp(&dist2(p, centroids[b])))
                .expect("k >= 1");
        }
        let mut sums = vec![[0f64; 3]; k];
        for (&l, p) in labels.iter().zip(points) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            sums[l][2] += 1.0;
        }
        let mut shift = 0f64;
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                let next = [s[0] / s[2], s[1] / s[2]];
                shift = shift.max(dist2(*c, next).sqrt());
                *c = next;
            }
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        iterations,
    })
}

/// K-means over the (H, S) features of `img`.
pub fn kmeans_baseline(img: &ImageRgb, k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans(&hs_features(img), k, seed)
}

/// Inclusive box on the 8-bit HSV scale (H/2, S·255, V).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvRange {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

impl Default for HsvRange {
    fn default() -> Self {
        Self {
            low: [128.0, 40.0, 0.0],
            high: [180.0, 180.0, 255.0],
        }
    }
}

impl HsvRange {
    pub fn new(low: [f64; 3], high: [f64; 3]) -> Result<Self> {
        if low.iter().zip(&high).any(|(l, h)| l > h) {
            return Err(Error::Argument(format!("inverted HSV bounds: low {low:?} > high {high:?}")));
        }
        Ok(Self { low, high })
    }

    pub fn contains(&self, scaled: [f64; 3]) -> bool {
        (0..3).all(|i| self.low[i] <= scaled[i] && scaled[i] <= self.high[i])
    }
}

pub fn scaled_hsv(p: HsvPixel) -> [f64; 3] {
    [p.h / 2.0, p.s * 255.0, p.v]
}

pub fn manual_range_baseline(img: &ImageRgb, range: &HsvRange) -> Result<BinaryMask> {
    HsvRange::new(range.low, range.high)?;
    let bits = img
        .pixels()
        .map(|[r, g, b]| range.contains(scaled_hsv(rgb_to_hsv(r, g, b))))
        .collect();
    BinaryMask::new(img.h, img.w, bits)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hsv_worked_examples() {
        let gray = rgb_to_hsv(128, 128, 128);
        assert_eq!((gray.h, gray.s, gray.v), (0.0, 0.0, 128.0));
        let red = rgb_to_hsv(255, 0, 0);
        assert!(close(red.h, 0.0, 1e-4) && close(red.s, 1.0, 1e-4) && close(red.v, 85.0, 1e-4), "{red:?}");
        let blue = rgb_to_hsv(0, 0, 255);
        assert!(close(blue.h, 240.0, 1e-4) && close(blue.s, 1.0, 1e-4) && close(blue.v, 85.0, 1e-4), "{blue:?}");
        let black = rgb_to_hsv(0, 0, 0);
        assert_eq!((black.h, black.s, black.v), (0.0, 0.0, 0.0));
        let green = rgb_to_hsv(0, 255, 0);
        assert!(close(green.h, 120.0, 1e-4), "{green:?}");
    }

    #[test]
    fn hsv_lattice_ranges() {
        let steps: Vec<u8> = (0..17).map(|i| (i * 255 / 16) as u8).collect();
        for &r in &steps {
            for &g in &steps {
                for &b in &steps {
                    let p = rgb_to_hsv(r, g, b);
                    assert!((0.0..=1.0).contains(&p.s), "{r},{g},{b}: {p:?}");
                    assert_eq!(p.v, (r as f64 + g as f64 + b as f64) / 3.0);
                    assert!((0.0..360.0).contains(&p.h), "{r},{g},{b}: {p:?}");
                    if r == g && g == b {
                        assert_eq!(p.s, 0.0);
                    }
                }
            }
        }
    }

    const SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

    #[test]
    fn fit_hand_example() {
        let m = MahalanobisModel::fit(&SQUARE).unwrap();
        assert_eq!(m.mean, [0.5, 0.5]);
        assert!(close(m.cov[0][0], 1.0 / 3.0, 1e-12) && close(m.cov[1][1], 1.0 / 3.0, 1e-12));
        assert_eq!(m.cov[0][1], 0.0);
        assert!(close(m.d2([1.0, 1.0]), 1.5, 1e-9));
        assert_eq!(m.d2(m.mean), 0.0);

        let mut rev = SQUARE;
        rev.reverse();
        assert_eq!(MahalanobisModel::fit(&rev).unwrap(), m);
        assert!(matches!(MahalanobisModel::fit(&SQUARE[..2]), Err(Error::Argument(_))));
    }

    #[test]
    fn identity_covariance_reduces_to_euclidean() {
        let m = MahalanobisModel {
            mean: [1.0, 2.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            cov_inv: [[1.0, 0.0], [0.0, 1.0]],
            n: 3,
            ridge: 0.0,
        };
        assert_eq!(m.d2([4.0, 6.0]), 25.0);
    }

    #[test]
    fn degenerate_fit_is_ridged() {
        let m = MahalanobisModel::fit(&[[3.0, 0.2]; 10]).unwrap();
        assert_eq!(m.ridge, COV_RIDGE);
        assert_eq!(m.d2([3.0, 0.2]), 0.0);
    }

    #[test]
    fn inverse_times_covariance_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(0.0..360.0), rng.random::<f64>()]).collect();
            let m = MahalanobisModel::fit(&pts).unwrap();
            assert_eq!(m.cov[0][1], m.cov[1][0]);
            for i in 0..2 {
                for j in 0..2 {
                    let v = m.cov_inv[i][0] * m.cov[0][j] + m.cov_inv[i][1] * m.cov[1][j];
                    assert!(close(v, (i == j) as u8 as f64, 1e-6), "{v}");
                }
            }
        }
    }

    #[test]
    fn chi2_values() {
        assert_eq!(chi2_threshold(1.0).unwrap(), 0.0);
        assert!(close(chi2_threshold(0.01).unwrap(), 9.2103, 1e-4));
        assert!(close(chi2_threshold(0.05).unwrap(), 5.9915, 1e-4));
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(chi2_threshold(bad), Err(Error::Argument(_))));
        }
    }

    fn blob_image(rng: &mut ChaCha8Rng) -> (ImageRgb, BinaryMask) {
        let (h, w) = (40, 50);
        let mut img = ImageRgb::filled(h, w, [0, 0, 0]);
        let mut truth = BinaryMask::empty(h, w);
        // 10×10 blob is 5% of the image
        let (bx, by) = (rng.random_range(0..w - 10), rng.random_range(0..h - 10));
        for y in 0..h {
            for x in 0..w {
                let inside = (bx..bx + 10).contains(&x) && (by..by + 10).contains(&y);
                let jitter = |c: i32, rng: &mut ChaCha8Rng| (c + rng.random_range(-4..=4)).clamp(0, 255) as u8;
                let base = if inside { [90, 40, 160] } else { [230, 190, 210] };
                img.put(x, y, [jitter(base[0], rng), jitter(base[1], rng), jitter(base[2], rng)]);
                truth.set(x, y, inside);
            }
        }
        (img, truth)
    }

    #[test]
    fn detects_distinct_hue_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (img, truth) = blob_image(&mut rng);
            let det = detect_anomalous_pixels(&img, DEFAULT_ALPHA).unwrap();
            let (mut hit, mut fp) = (0, 0);
            for (m, t) in det.mask.bits.iter().zip(&truth.bits) {
                hit += (*m && *t) as usize;
                fp += (*m && !*t) as usize;
            }
            let bg = truth.bits.len() - truth.count();
            assert!(hit as f64 >= 0.8 * truth.count() as f64, "{hit}");
            assert!(fp as f64 <= 0.02 * bg as f64, "{fp}");
        }
    }

    #[test]
    fn uniform_noise_flag_rate() {
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // flat stain colour with independent uniform noise per channel
            let base = [220i32, 170, 200];
            let data: Vec<u8> = (0..32 * 32 * 3)
                .map(|i| (base[i % 3] + rng.random_range(-20..=20)) as u8)
                .collect();
            let img = ImageRgb::new(32, 32, data).unwrap();
            let det = detect_anomalous_pixels(&img, DEFAULT_ALPHA).unwrap();
            total += det.mask.count() as f64 / 1024.0;
        }
        let frac = total / 100.0;
        assert!((0.001..=0.05).contains(&frac), "{frac}");
    }

    #[test]
    fn constant_image_flags_nothing() {
        let det = detect_anomalous_pixels(&ImageRgb::filled(8, 8, [200, 100, 150]), 0.01).unwrap();
        assert_eq!(det.mask.count(), 0);
        assert!(matches!(detect_anomalous_pixels(&ImageRgb::filled(8, 8, [1, 2, 3]), 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn threshold_is_strict() {
        // four corners of a square all sit at D² = 1.5
        let mut img = ImageRgb::filled(2, 2, [0, 0, 0]);
        img.put(0, 0, [255, 0, 0]);
        img.put(1, 0, [0, 255, 0]);
        img.put(0, 1, [0, 0, 255]);
        let det = detect_anomalous_pixels(&img, 1.0).unwrap();
        let flagged: Vec<bool> = det.d2.iter().map(|&d| d > det.threshold).collect();
        assert_eq!(det.mask.bits, flagged);

        let alpha = (-1.5f64 / 2.0).exp();
        let m = MahalanobisModel::fit(&SQUARE).unwrap();
        let t = chi2_threshold(alpha).unwrap();
        let d = m.d2([1.0, 1.0]);
        assert!(close(d, t, 1e-12));
        assert_eq!(d > t, d > -2.0 * alpha.ln());
    }

    fn flood_fill(mask: &BinaryMask, conn: Connectivity) -> Vec<Vec<usize>> {
        let (h, w) = (mask.h as i64, mask.w as i64);
        let mut seen = vec![false; mask.bits.len()];
        let mut out = Vec::new();
        fn visit(
            x: i64,
            y: i64,
            h: i64,
            w: i64,
            mask: &BinaryMask,
            conn: Connectivity,
            seen: &mut [bool],
            acc: &mut Vec<usize>,
        ) {
            if x < 0 || y < 0 || x >= w || y >= h {
                return;
            }
            let i = (y * w + x) as usize;
            if seen[i] || !mask.bits[i] {
                return;
            }
            seen[i] = true;
            acc.push(i);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                visit(x + dx, y + dy, h, w, mask, conn, seen, acc);
            }
            if conn == Connectivity::Eight {
                for (dx, dy) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                    visit(x + dx, y + dy, h, w, mask, conn, seen, acc);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = Vec::new();
                visit(x, y, h, w, mask, conn, &mut seen, &mut acc);
                if !acc.is_empty() {
                    acc.sort();
                    out.push(acc);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn components_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = rng.random_range(0.2..0.7);
            let bits = (0..32 * 32).map(|_| rng.random_bool(p)).collect();
            let mask = BinaryMask::new(32, 32, bits).unwrap();
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let mut ours = label_components(&mask, conn);
                for w in ours.windows(2) {
                    assert!(w[0].len() > w[1].len() || (w[0].len() == w[1].len() && w[0][0] < w[1][0]));
                }
                ours.sort();
                assert_eq!(ours, flood_fill(&mask, conn));
            }
        }
    }

    #[test]
    fn component_examples() {
        let mut mask = BinaryMask::empty(3, 3);
        mask.set(0, 0, true);
        mask.set(1, 1, true);
        assert_eq!(connected_components(&mask, Connectivity::Eight, 1, None).unwrap().len(), 1);
        assert_eq!(connected_components(&mask, Connectivity::Four, 1, None).unwrap().len(), 2);
        assert!(connected_components(&BinaryMask::empty(4, 4), Connectivity::Eight, 1, None)
            .unwrap()
            .is_empty());

        let mut mask = BinaryMask::empty(6, 8);
        for (x, y) in [(1, 1), (2, 1), (1, 2), (6, 4), (7, 4), (6, 5), (7, 5)] {
            mask.set(x, y, true);
        }
        let d2: Vec<f64> = (0..48).map(|i| i as f64).collect();
        let comps = connected_components(&mask, Connectivity::Four, 3, Some(&d2)).unwrap();
        assert_eq!(comps.len(), 2);
        assert_eq!((comps[0].id, comps[0].pixels, comps[0].bbox), (1, 4, [6, 4, 2, 2]));
        assert_eq!(comps[0].centroid, [6.5, 4.5]);
        assert_eq!(comps[0].max_d2, 47.0);
        assert_eq!(comps[0].mean_d2, (38.0 + 39.0 + 46.0 + 47.0) / 4.0);
        assert_eq!((comps[1].id, comps[1].pixels, comps[1].bbox), (2, 3, [1, 1, 2, 2]));
        assert_eq!(connected_components(&mask, Connectivity::Four, 4, None).unwrap().len(), 1);
        assert!(connected_components(&mask, Connectivity::Four, 1, Some(&d2[..3])).is_err());
        assert!(Connectivity::try_from(6).is_err());
    }

    #[test]
    fn kmeans_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 2]> = (0..200).map(|_| [rng.random_range(0.0..10.0), rng.random()]).collect();
        let one = kmeans(&pts, 1, 0).unwrap();
        let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / 200.0, pts.iter().map(|p| p[1]).sum::<f64>() / 200.0];
        assert!(dist2(one.centroids[0], mean).sqrt() < 1e-9);
        assert!(one.labels.iter().all(|&l| l == 0));

        let few = [[0.0, 0.0], [5.0, 0.5], [5.0, 0.5], [9.0, 1.0], [0.0, 0.0]];
        let r = kmeans(&few, 3, 1).unwrap();
        for (l, p) in r.labels.iter().zip(&few) {
            assert_eq!(r.centroids[*l], *p);
        }
        assert!(matches!(kmeans(&few, 4, 0), Err(Error::Argument(_))));
        assert!(matches!(kmeans(&few, 0, 0), Err(Error::Argument(_))));
        assert_eq!(kmeans(&pts, 3, 9).unwrap(), kmeans(&pts, 3, 9).unwrap());
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..300 {
            let c = if i % 3 == 0 { [300.0, 0.1] } else { [200.0, 0.6] };
            pts.push([c[0] + rng.random_range(-5.0..5.0), c[1] + rng.random_range(-0.05..0.05)]);
            truth.push(i % 3 == 0);
        }
        // oracle: best within-cluster sum of squares over several restarts
        let sse = |r: &KMeansResult| -> f64 { pts.iter().zip(&r.labels).map(|(p, &l)| dist2(*p, r.centroids[l])).sum() };
        let best = (0..8).map(|s| kmeans(&pts, 2, s).unwrap()).min_by(|a, b| sse(a).total_cmp(&sse(b))).unwrap();
        let r = kmeans(&pts, 2, 0).unwrap();
        assert!((sse(&r) - sse(&best)).abs() < 1e-6);
        let first = r.labels[0];
        for (l, t) in r.labels.iter().zip(&truth) {
            assert_eq!(*l == first, *t);
        }
    }

    #[test]
    fn manual_range_examples() {
        let range = HsvRange::default();
        assert_eq!((range.low, range.high), ([128.0, 40.0, 0.0], [180.0, 180.0, 255.0]));
        assert!(range.contains([150.0, 100.0, 100.0]));
        assert!(!range.contains(scaled_hsv(rgb_to_hsv(0, 0, 0))));
        let p = [140.0, 60.0, 90.0];
        assert!(HsvRange::new(p, p).unwrap().contains(p));
        assert!(matches!(HsvRange::new([10.0, 0.0, 0.0], [5.0, 255.0, 255.0]), Err(Error::Argument(_))));

        let mut img = ImageRgb::filled(2, 2, [0, 0, 0]);
        img.put(1, 1, [110, 40, 150]);
        let m = manual_range_baseline(&img, &range).unwrap();
        assert_eq!(m.bits, vec![false, false, false, true]);
    }

    fn random_points(seed: u64, n: usize) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho: f64 = rng.random_range(-0.8..0.8);
        (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                [300.0 + 40.0 * a, 0.3 + 0.1 * (rho * a + (1.0 - rho * rho).sqrt() * b)]
            })
            .collect()
    }

    proptest! {
        #[test]
        fn mean_in_sample_d2_trace_identity(seed in 0u64..10_000, n in 3usize..200) {
            let pts = random_points(seed, n);
            let m = MahalanobisModel::fit(&pts).unwrap();
            prop_assume!(m.ridge == 0.0);
            let mean = pts.iter().map(|&p| m.d2(p)).sum::<f64>() / n as f64;
            let expected = 2.0 * (n as f64 - 1.0) / n as f64;
            prop_assert!((mean - expected).abs() < 1e-6, "{} vs {}", mean, expected);
        }

        #[test]
        fn d2_affine_invariant(seed in 0u64..10_000, sh in 0.1f64..10.0, ss in 0.1f64..10.0,
                               oh in -100.0f64..100.0, os in -1.0f64..1.0) {
            let pts = random_points(seed, 50);
            let f = |p: [f64; 2]| [sh * p[0] + oh, ss * p[1] + os];
            let m = MahalanobisModel::fit(&pts).unwrap();
            let mt = MahalanobisModel::fit(&pts.iter().map(|&p| f(p)).collect::<Vec<_>>()).unwrap();
            prop_assume!(m.ridge == 0.0 && mt.ridge == 0.0);
            for q in [[310.0, 0.25], [250.0, 0.9], pts[0]] {
                prop_assert!((m.d2(q) - mt.d2(f(q))).abs() < 1e-6 * m.d2(q).max(1.0));
            }
        }

        #[test]
        fn hsv_ranges_hold(r: u8, g: u8, b: u8) {
            let p = rgb_to_hsv(r, g, b);
            prop_assert!((0.0..=1.0).contains(&p.s));
            prop_assert!((0.0..360.0).contains(&p.h));
            prop_assert_eq!(p.v, (r as f64 + g as f64 + b as f64) / 3.0);
        }
    }
}
