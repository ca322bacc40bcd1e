use serde::{Deserialize, Serialize};

use crate::chroma::{chi2_threshold, connected_components, detect_anomalous_pixels, Component, Connectivity};
use crate::chroma::{DEFAULT_ALPHA, DEFAULT_MIN_BLOB};
use crate::error::{Error, Result};
use crate::imageops::ImageRgb;

pub const BOX_COLOR: [u8; 3] = [0, 255, 0];
pub const BOX_MARGIN: usize = 2;
pub const BOX_THICKNESS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub alpha: f64,
    pub min_blob: usize,
    pub connectivity: Connectivity,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            min_blob: DEFAULT_MIN_BLOB,
            connectivity: Connectivity::Eight,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Verdict for one image. Field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub image: String,
    pub alpha: f64,
    pub threshold: f64,
    pub infected: bool,
    pub components: Vec<Component>,
}

pub fn detect_image(name: &str, img: &ImageRgb, params: &DetectParams) -> Result<DetectionReport> {
    params.validate()?;
    let det = detect_anomalous_pixels(img, params.alpha)?;
    let components = connected_components(&det.mask, params.connectivity, params.min_blob, Some(&det.d2))?;
    Ok(DetectionReport {
        image: name.to_owned(),
        alpha: params.alpha,
        threshold: chi2_threshold(params.alpha)?,
        infected: !components.is_empty(),
        components,
    })
}

/// Pixels of the box stroke drawn around `bbox` (`[x, y, w, h]`), clipped to
/// an `h × w` image.
pub fn box_stroke(bbox: [usize; 4], h: usize, w: usize) -> Vec<(usize, usize)> {
    let [bx, by, bw, bh] = bbox;
    let x0 = bx as i64 - (BOX_MARGIN + BOX_THICKNESS) as i64;
    let y0 = by as i64 - (BOX_MARGIN + BOX_THICKNESS) as i64;
    let x1 = (bx + bw + BOX_MARGIN + BOX_THICKNESS) as i64 - 1;
    let y1 = (by + bh + BOX_MARGIN + BOX_THICKNESS) as i64 - 1;
    let t = BOX_THICKNESS as i64;
    let mut out = Vec::new();
    for y in y0.max(0)..=y1.min(h as i64 - 1) {
        for x in x0.max(0)..=x1.min(w as i64 - 1) {
            let edge = x < x0 + t || x > x1 - t || y < y0 + t || y > y1 - t;
            if edge {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Copy of `img` with a green box around every component.
pub fn draw_overlay(img: &ImageRgb, components: &[Component]) -> ImageRgb {
    let mut out = img.clone();
    for c in components {
        for (x, y) in box_stroke(c.bbox, img.h, img.w) {
            out.put(x, y, BOX_COLOR);
        }
    }
    out
}
