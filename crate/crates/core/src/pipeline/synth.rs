//! Seeded Giemsa-like smear scenes with exact ground truth.
//!
//! Scenes are a pink background with non-overlapping lavender disks (cells).
//! Half of the scenes (rounded) carry one or two purple chromatin disks fully
//! inside a cell. Pixel membership is decided at pixel centers and the image
//! is rendered from the masks, so the masks match the pixels exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{BinaryMask, ImageRgb};

use super::dataset::{write_mask, write_rgb};

pub const BACKGROUND: [u8; 3] = [235, 195, 215];
pub const NOISE_SIGMA: f64 = 3.0;
pub const INFECTED_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub infected: bool,
}

impl Cell {
    fn dist(&self, x: usize, y: usize) -> f64 {
        ((x as f64 + 0.5 - self.cx).powi(2) + (y as f64 + 0.5 - self.cy).powi(2)).sqrt()
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        self.dist(x, y) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub index: usize,
    pub seed: u64,
    pub image: ImageRgb,
    pub cells: Vec<Cell>,
    /// Row-major cell id per pixel; 0 is background, `k` is `cells[k - 1]`.
    pub cell_labels: Vec<u32>,
    pub infected_mask: BinaryMask,
}

impl SyntheticScene {
    pub fn tile(&self) -> usize {
        self.image.w
    }

    pub fn is_infected(&self) -> bool {
        self.cells.iter().any(|c| c.infected)
    }

    pub fn cell_mask(&self) -> BinaryMask {
        let t = self.tile();
        BinaryMask::new(t, t, self.cell_labels.iter().map(|&l| l > 0).collect()).expect("tile sized")
    }

    /// Cell pixels within `band` pixels of their disk edge.
    pub fn ring_mask(&self, band: f64) -> BinaryMask {
        self.cell_band(|c, d| d >= c.radius - band)
    }

    /// Cell pixels deeper than `depth` pixels from their disk edge.
    pub fn interior_mask(&self, depth: f64) -> BinaryMask {
        self.cell_band(|c, d| d < c.radius - depth)
    }

    /// Background pixels at least `margin` pixels away from every cell edge.
    pub fn background_mask(&self, margin: f64) -> BinaryMask {
        let t = self.tile();
        let mut m = BinaryMask::empty(t, t);
        for y in 0..t {
            for x in 0..t {
                let clear = self.cells.iter().all(|c| c.dist(x, y) > c.radius + margin);
                m.set(x, y, clear);
            }
        }
        m
    }

    fn cell_band(&self, keep: impl Fn(&Cell, f64) -> bool) -> BinaryMask {
        let t = self.tile();
        let mut m = BinaryMask::empty(t, t);
        for y in 0..t {
            for x in 0..t {
                let l = self.cell_labels[y * t + x];
                if l > 0 {
                    let c = &self.cells[l as usize - 1];
                    m.set(x, y, keep(c, c.dist(x, y)));
                }
            }
        }
        m
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn jitter(rng: &mut ChaCha8Rng, lo: [u8; 3], hi: [u8; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| rng.random_range(lo[i] as f64..=hi[i] as f64))
}

fn place_cells(tile: usize, rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let t = tile as f64;
    let target = rng.random_range(0.30..0.45) * t * t;
    let mut cells: Vec<Cell> = Vec::new();
    let mut area = 0.0;
    for _ in 0..4000 {
        if area >= target {
            break;
        }
        let r = t * rng.random_range(0.07..0.095);
        if 2.0 * r + 2.0 >= t {
            continue;
        }
        let cx = rng.random_range(r + 1.0..t - r - 1.0);
        let cy = rng.random_range(r + 1.0..t - r - 1.0);
        let free = cells
            .iter()
            .all(|c| ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt() >= c.radius + r + 2.0);
        if free {
            cells.push(Cell {
                cx,
                cy,
                radius: r,
                infected: false,
            });
            area += std::f64::consts::PI * r * r;
        }
    }
    cells
}

fn render(index: usize, seed: u64, tile: usize, infected: bool) -> SyntheticScene {
    let mut rng = scene_rng(seed, index as u64);
    let mut cells = place_cells(tile, &mut rng);

    let mut parasites: Vec<(usize, Cell)> = Vec::new();
    if infected && !cells.is_empty() {
        let count = if rng.random_bool(0.5) { 2 } else { 1 }.min(cells.len());
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.shuffle(&mut rng);
        for &k in &order[..count] {
            let cell = cells[k];
            let r = (tile as f64 * rng.random_range(0.04..0.05)).min(cell.radius - 1.5);
            let reach = (cell.radius - r - 1.0).max(0.0);
            let (a, d) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..=reach));
            let p = Cell {
                cx: cell.cx + d * a.cos(),
                cy: cell.cy + d * a.sin(),
                radius: r,
                infected: true,
            };
            cells[k].infected = true;
            parasites.push((k, p));
        }
    }

    let bg = jitter(&mut rng, [233, 193, 213], [237, 197, 217]);
    let cell_colors: Vec<[f64; 3]> = cells.iter().map(|_| jitter(&mut rng, [190, 160, 210], [200, 170, 215])).collect();
    let parasite_colors: Vec<[f64; 3]> =
        parasites.iter().map(|_| jitter(&mut rng, [105, 35, 145], [115, 45, 155])).collect();

    let mut labels = vec![0u32; tile * tile];
    let mut infected_mask = BinaryMask::empty(tile, tile);
    let mut image = ImageRgb::filled(tile, tile, [0, 0, 0]);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for y in 0..tile {
        for x in 0..tile {
            let mut color = bg;
            if let Some(k) = cells.iter().position(|c| c.covers(x, y)) {
                labels[y * tile + x] = k as u32 + 1;
                color = cell_colors[k];
                if let Some(j) = parasites.iter().position(|(pk, p)| *pk == k && p.covers(x, y)) {
                    infected_mask.set(x, y, true);
                    color = parasite_colors[j];
                }
            }
            let px = color.map(|c| (c + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
            image.put(x, y, px);
        }
    }
    SyntheticScene {
        index,
        seed,
        image,
        cells,
        cell_labels: labels,
        infected_mask,
    }
}

/// Scene indices that carry parasites: exactly round(n · 0.5) of them.
pub fn infected_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut scene_rng(seed, u64::MAX));
    let mut chosen = order[..(n as f64 * INFECTED_FRACTION).round() as usize].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn synth_generate(n: usize, tile: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(Error::Argument("scene count must be at least 1".into()));
    }
    if tile < 16 {
        return Err(Error::Argument(format!("tile {tile} is too small for synthetic scenes (minimum 16)")));
    }
    let infected = infected_indices(n, seed);
    Ok((0..n).map(|i| render(i, seed, tile, infected.binary_search(&i).is_ok())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub cells_mask: String,
    pub infected_mask: String,
    pub infected: bool,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub tile: usize,
    pub scenes: Vec<ManifestEntry>,
}

/// Writes `scene_NNNN.png` images, `truth/` masks and `manifest.json`.
pub fn write_scenes(dir: impl AsRef<Path>, scenes: &[SyntheticScene], seed: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    let truth = dir.join("truth");
    std::fs::create_dir_all(&truth).map_err(|e| Error::file(&truth, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let stem = format!("scene_{:04}", s.index);
        let entry = ManifestEntry {
            image: format!("{stem}.png"),
            cells_mask: format!("truth/{stem}_cells.png"),
            infected_mask: format!("truth/{stem}_infected.png"),
            infected: s.is_infected(),
            cells: s.cells.clone(),
        };
        write_rgb(dir.join(&entry.image), &s.image)?;
        write_mask(dir.join(&entry.cells_mask), &s.cell_mask())?;
        write_mask(dir.join(&entry.infected_mask), &s.infected_mask)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        seed,
        tile: scenes.first().map_or(0, |s| s.tile()),
        scenes: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}
