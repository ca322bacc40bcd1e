use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ExtendedColorType, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::imageops::{normalize_minmax, to_grayscale, BinaryMask, ImageGray, ImageRgb};

/// One decoded dataset entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub rgb: ImageRgb,
    /// Min-max normalized luminance of `rgb`.
    pub gray: ImageGray,
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_owned(),
        source,
    }
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::file(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::file(path, e))?;
    let img = reader.decode().map_err(|e| image_error(path, e))?.to_rgb8();
    ImageRgb::new(img.height() as usize, img.width() as usize, img.into_raw())
}

/// Reads a PNG as a binary mask: any nonzero channel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let rgb = read_rgb(path)?;
    BinaryMask::new(rgb.h, rgb.w, rgb.pixels().map(|p| p != [0, 0, 0]).collect())
}

pub fn write_rgb(path: impl AsRef<Path>, img: &ImageRgb) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(path, &img.data, img.w as u32, img.h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| image_error(path, e))
}

/// Writes `img` (values in [0, 1]) as an 8-bit grayscale PNG.
pub fn write_gray(path: impl AsRef<Path>, img: &ImageGray) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(path, &img.to_u8(), img.w as u32, img.h as u32, ExtendedColorType::L8)
        .map_err(|e| image_error(path, e))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_gray())
}

fn to_buffer(img: &ImageRgb) -> RgbImage {
    RgbImage::from_raw(img.w as u32, img.h as u32, img.data.clone()).expect("buffer length matches")
}

fn from_buffer(buf: RgbImage) -> ImageRgb {
    ImageRgb::new(buf.height() as usize, buf.width() as usize, buf.into_raw()).expect("buffer length matches")
}

/// Bilinear resize to `h × w`.
pub fn resize_rgb(img: &ImageRgb, h: usize, w: usize) -> ImageRgb {
    if (img.h, img.w) == (h, w) {
        return img.clone();
    }
    from_buffer(image::imageops::resize(&to_buffer(img), w as u32, h as u32, FilterType::Triangle))
}

/// Bilinear resize of a single-channel real image.
pub fn resize_gray(img: &ImageGray, h: usize, w: usize) -> ImageGray {
    if (img.h, img.w) == (h, w) {
        return img.clone();
    }
    let buf = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(img.w as u32, img.h as u32, img.pixels.clone())
        .expect("buffer length matches");
    let out = image::imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    ImageGray::new(h, w, out.into_raw()).expect("buffer length matches")
}

/// Center crop when both sides are at least `tile`, bilinear resize otherwise.
pub fn fit_tile(img: &ImageRgb, tile: usize) -> ImageRgb {
    if img.h >= tile && img.w >= tile {
        let (y0, x0) = ((img.h - tile) / 2, (img.w - tile) / 2);
        let mut out = ImageRgb::filled(tile, tile, [0, 0, 0]);
        for y in 0..tile {
            let src = ((y0 + y) * img.w + x0) * 3;
            out.data[y * tile * 3..(y + 1) * tile * 3].copy_from_slice(&img.data[src..src + tile * 3]);
        }
        out
    } else {
        resize_rgb(img, tile, tile)
    }
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn sample_from_rgb(name: impl Into<String>, rgb: ImageRgb, tile: usize) -> Sample {
    let rgb = fit_tile(&rgb, tile);
    let gray = normalize_minmax(&to_grayscale(&rgb));
    Sample {
        name: name.into(),
        rgb,
        gray,
    }
}

/// Decodes every PNG in `dir` and fits it to `tile × tile`. Undecodable files
/// are skipped with a warning.
pub fn load_dataset(dir: impl AsRef<Path>, tile: usize) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    if tile == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(files.len());
    for path in &files {
        match read_rgb(path) {
            Ok(rgb) => {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.push(sample_from_rgb(name, rgb, tile));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the {} PNG files in {} could be decoded",
            files.len(),
            dir.display()
        )));
    }
    Ok(out)
}
