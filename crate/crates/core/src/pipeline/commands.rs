//! The five pipeline commands as library calls. The CLI is a thin layer over
//! these.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::chroma::{detect_anomalous_pixels, kmeans_baseline, label_components, manual_range_baseline, HsvRange};
use crate::error::{Error, Result};
use crate::imageops::{
    binarize, convolve_fixed, cross_section_profile, gradient_magnitude, normalize_minmax, otsu_threshold,
    to_grayscale, BinaryMask, FixedKernel, ImageGray, ImageRgb,
};
use crate::unet::{load_model, save_model, train, EpochLoss, TrainConfig, TrainReport, Unet, UnetConfig};

use super::dataset::{list_pngs, load_dataset, read_mask, read_rgb, resize_gray, write_gray, write_rgb};
use super::report::{detect_image, draw_overlay, DetectParams, DetectionReport};
use super::synth::{synth_generate, write_scenes, Manifest};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Defaults to `out` with a `.csv` extension.
    pub history: Option<PathBuf>,
    pub unet: UnetConfig,
    pub train: TrainConfig,
}

impl TrainOptions {
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            out: out.into(),
            history: None,
            unet: UnetConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn history_path(&self) -> PathBuf {
        self.history.clone().unwrap_or_else(|| self.out.with_extension("csv"))
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.out.with_extension("run.json")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.data.is_dir() {
            return Err(Error::Config(format!("data directory {} does not exist", self.data.display())));
        }
        self.unet.validate()?;
        self.train.validate()
    }
}

/// Run metadata written next to the model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetadata {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub tile: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout: f32,
    pub images: usize,
    pub steps: u64,
    pub checksum: String,
    pub history: Vec<EpochLoss>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Unet,
    pub report: TrainReport,
    pub metadata: TrainMetadata,
}

pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,l_ssim,l_rms,total\n");
    for e in history {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.l_ssim, e.l_rms, e.total);
    }
    s
}

pub fn cmd_train(opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.validate()?;
    let samples = load_dataset(&opts.data, opts.unet.input_size)?;
    log::info!("training on {} images from {}", samples.len(), opts.data.display());
    let images: Vec<ImageGray> = samples.into_iter().map(|s| s.gray).collect();
    let mut model = Unet::new(opts.unet)?;
    let report = train(&mut model, &images, &opts.train)?;
    save_model(&model, &opts.out)?;
    write_text(&opts.history_path(), &history_csv(&report.history))?;
    let metadata = TrainMetadata {
        epochs: opts.train.epochs,
        lr: opts.train.lr,
        batch_size: opts.train.batch_size,
        seed: opts.train.seed,
        tile: opts.unet.input_size,
        base_width: opts.unet.base_width,
        depth: opts.unet.depth,
        dropout: opts.unet.dropout,
        images: report.images,
        steps: report.steps,
        checksum: format!("{:016x}", model.checksum()),
        history: report.history.clone(),
    };
    write_text(&opts.metadata_path(), &(serde_json::to_string_pretty(&metadata)? + "\n"))?;
    Ok(TrainOutcome {
        model,
        report,
        metadata,
    })
}

/// |Laplacian| of the normalized image, stretched to [0, 1].
pub fn raw_laplacian_boundary(gray: &ImageGray) -> ImageGray {
    let lap = convolve_fixed(&normalize_minmax(gray), FixedKernel::Laplacian);
    normalize_minmax(&lap.map(f32::abs))
}

/// Sobel magnitude of the Otsu binarization, stretched to [0, 1]. A flat
/// image has no edges.
pub fn binarized_sobel_boundary(gray: &ImageGray) -> ImageGray {
    let norm = normalize_minmax(gray);
    match otsu_threshold(&norm) {
        Ok(t) => normalize_minmax(&gradient_magnitude(&binarize(&norm, t).to_gray())),
        Err(_) => ImageGray::filled(gray.h, gray.w, 0.0),
    }
}

/// Boundary map of an arbitrary-size image: the image is resized to the
/// model tile, predicted, and the result resized back.
pub fn predict_boundary_any_size(model: &Unet, gray: &ImageGray) -> Result<ImageGray> {
    let s = model.config().input_size;
    let tile = resize_gray(gray, s, s);
    let pred = model.predict_boundary(&tile)?;
    Ok(normalize_minmax(&resize_gray(&pred, gray.h, gray.w)))
}

pub const PROFILE_METHODS: [&str; 3] = ["raw_laplacian", "binarized_sobel", "unet"];

/// Cross-section rows of the two classical baselines.
pub fn baseline_profiles(rgb: &ImageRgb, row: usize) -> Result<Vec<(String, Vec<f32>)>> {
    let gray = to_grayscale(rgb);
    Ok(vec![
        (PROFILE_METHODS[0].to_owned(), cross_section_profile(&raw_laplacian_boundary(&gray), row)?),
        (PROFILE_METHODS[1].to_owned(), cross_section_profile(&binarized_sobel_boundary(&gray), row)?),
    ])
}

pub fn profile_csv(rows: &[(String, Vec<f32>)]) -> String {
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut s = String::from("method");
    for x in 0..width {
        let _ = write!(s, ",x{x}");
    }
    s.push('\n');
    for (name, values) in rows {
        s.push_str(name);
        for v in values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryOptions {
    pub model: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub profile: Option<usize>,
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryOutcome {
    pub boundary: ImageGray,
    pub profiles: Option<Vec<(String, Vec<f32>)>>,
}

pub fn cmd_boundary(opts: &BoundaryOptions) -> Result<BoundaryOutcome> {
    if opts.profile.is_some() != opts.csv.is_some() {
        return Err(Error::Config("--profile and --csv must be given together".into()));
    }
    let model = load_model(&opts.model)?;
    let rgb = read_rgb(&opts.image)?;
    let boundary = predict_boundary_any_size(&model, &to_grayscale(&rgb))?;
    write_gray(&opts.out, &boundary)?;
    let profiles = match (opts.profile, &opts.csv) {
        (Some(row), Some(csv)) => {
            let mut rows = baseline_profiles(&rgb, row)?;
            rows.push((PROFILE_METHODS[2].to_owned(), cross_section_profile(&boundary, row)?));
            write_text(csv, &profile_csv(&rows))?;
            Some(rows)
        }
        _ => None,
    };
    Ok(BoundaryOutcome { boundary, profiles })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectInput {
    Image(PathBuf),
    Data(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectOptions {
    pub input: DetectInput,
    pub out: PathBuf,
    pub params: DetectParams,
    /// Overlay PNG for a single image, overlay directory for `--data`.
    pub overlay: Option<PathBuf>,
    /// Worker threads for directory input.
    pub workers: usize,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

fn detect_file(path: &Path, params: &DetectParams, overlay: Option<&Path>) -> Result<DetectionReport> {
    let rgb = read_rgb(path)?;
    let report = detect_image(&file_name(path), &rgb, params)?;
    if let Some(out) = overlay {
        write_rgb(out, &draw_overlay(&rgb, &report.components))?;
    }
    Ok(report)
}

pub fn cmd_detect(opts: &DetectOptions) -> Result<Vec<DetectionReport>> {
    opts.params.validate()?;
    match &opts.input {
        DetectInput::Image(path) => {
            let report = detect_file(path, &opts.params, opts.overlay.as_deref())?;
            write_text(&opts.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            Ok(vec![report])
        }
        DetectInput::Data(dir) => {
            let files = list_pngs(dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
            }
            if let Some(o) = &opts.overlay {
                std::fs::create_dir_all(o).map_err(|e| Error::file(o, e))?;
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.workers.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            let results: Vec<Result<DetectionReport>> = pool.install(|| {
                files
                    .par_iter()
                    .map(|p| {
                        let overlay = opts.overlay.as_ref().map(|o| o.join(file_name(p)));
                        detect_file(p, &opts.params, overlay.as_deref())
                    })
                    .collect()
            });
            let mut reports = Vec::with_capacity(results.len());
            for (path, r) in files.iter().zip(results) {
                match r {
                    Ok(rep) => reports.push(rep),
                    Err(e @ Error::Image { .. }) => log::warn!("skipping {}: {e}", path.display()),
                    Err(e) => return Err(e),
                }
            }
            if reports.is_empty() {
                return Err(Error::Dataset(format!("no decodable PNG files in {}", dir.display())));
            }
            write_text(&opts.out, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
            Ok(reports)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOptions {
    pub image: PathBuf,
    pub truth: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    pub params: DetectParams,
    pub range: HsvRange,
    pub out: PathBuf,
}

impl CompareOptions {
    pub fn new(image: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
            truth: None,
            k: 3,
            seed: 0,
            params: DetectParams::default(),
            range: HsvRange::default(),
            out: out.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub label: String,
    pub pixels: usize,
    /// Undefined when nothing was predicted or no ground truth was given.
    pub precision: Option<f64>,
    /// Undefined when the ground truth is empty or absent.
    pub recall: Option<f64>,
}

/// Pixel-level precision and recall of `pred` against `truth`.
pub fn precision_recall(pred: &BinaryMask, truth: &BinaryMask) -> Result<(Option<f64>, Option<f64>)> {
    if (pred.h, pred.w) != (truth.h, truth.w) {
        return Err(Error::dim("precision_recall", (pred.h, pred.w), (truth.h, truth.w)));
    }
    let tp = pred.bits.iter().zip(&truth.bits).filter(|(p, t)| **p && **t).count() as f64;
    let (np, nt) = (pred.count() as f64, truth.count() as f64);
    Ok(((np > 0.0).then(|| tp / np), (nt > 0.0).then(|| tp / nt)))
}

fn fmt_range(r: &HsvRange) -> String {
    let f = |v: [f64; 3]| format!("({},{},{})", v[0], v[1], v[2]);
    format!("low={} high={}", f(r.low), f(r.high))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("method,label,pixels,precision,recall\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_field(&r.method),
            csv_field(&r.label),
            r.pixels,
            opt(r.precision),
            opt(r.recall)
        );
    }
    s
}

pub fn compare_image(rgb: &ImageRgb, truth: Option<&BinaryMask>, opts: &CompareOptions) -> Result<Vec<CompareRow>> {
    opts.params.validate()?;
    let mut masks: Vec<(String, String, BinaryMask)> = Vec::new();
    let km = kmeans_baseline(rgb, opts.k, opts.seed)?;
    for (c, centroid) in km.centroids.iter().enumerate() {
        let label = format!("k={} cluster={} centroid=({:.3},{:.4})", opts.k, c, centroid[0], centroid[1]);
        masks.push(("kmeans".into(), label, km.cluster_mask(rgb.h, rgb.w, c)?));
    }
    masks.push(("manual_range".into(), fmt_range(&opts.range), manual_range_baseline(rgb, &opts.range)?));
    let det = detect_anomalous_pixels(rgb, opts.params.alpha)?;
    let alpha = format!("alpha={}", opts.params.alpha);
    let mut blobs = BinaryMask::empty(rgb.h, rgb.w);
    for i in label_components(&det.mask, opts.params.connectivity)
        .into_iter()
        .filter(|c| c.len() >= opts.params.min_blob.max(1))
        .flatten()
    {
        blobs.bits[i] = true;
    }
    masks.push(("mahalanobis".into(), alpha.clone(), det.mask));
    masks.push((
        "mahalanobis_blobs".into(),
        format!("{alpha} min_blob={}", opts.params.min_blob),
        blobs,
    ));

    masks
        .into_iter()
        .map(|(method, label, mask)| {
            let (precision, recall) = match truth {
                Some(t) => precision_recall(&mask, t)?,
                None => (None, None),
            };
            Ok(CompareRow {
                method,
                label,
                pixels: mask.count(),
                precision,
                recall,
            })
        })
        .collect()
}

pub fn cmd_compare(opts: &CompareOptions) -> Result<Vec<CompareRow>> {
    let rgb = read_rgb(&opts.image)?;
    let truth = opts.truth.as_ref().map(read_mask).transpose()?;
    let rows = compare_image(&rgb, truth.as_ref(), opts)?;
    write_text(&opts.out, &compare_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub tile: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_synth(opts: &SynthOptions) -> Result<Manifest> {
    let scenes = synth_generate(opts.n, opts.tile, opts.seed)?;
    write_scenes(&opts.out, &scenes, opts.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_format() {
        let h = [EpochLoss {
            epoch: 1,
            l_ssim: 0.5,
            l_rms: 0.25,
            total: 0.75,
        }];
        assert_eq!(history_csv(&h), "epoch,l_ssim,l_rms,total\n1,0.5,0.25,0.75\n");
    }

    #[test]
    fn precision_recall_cases() {
        let mut t = BinaryMask::empty(2, 2);
        t.set(0, 0, true);
        t.set(1, 0, true);
        assert_eq!(precision_recall(&t, &t).unwrap(), (Some(1.0), Some(1.0)));
        let mut p = BinaryMask::empty(2, 2);
        p.set(0, 0, true);
        p.set(0, 1, true);
        assert_eq!(precision_recall(&p, &t).unwrap(), (Some(0.5), Some(0.5)));
        assert_eq!(precision_recall(&BinaryMask::empty(2, 2), &t).unwrap(), (None, Some(0.0)));
        assert!(precision_recall(&BinaryMask::empty(1, 2), &t).is_err());
    }

    #[test]
    fn compare_rows() {
        let mut img = ImageRgb::filled(20, 20, [230, 190, 210]);
        let mut truth = BinaryMask::empty(20, 20);
        for y in 5..10 {
            for x in 5..10 {
                img.put(x, y, [110, 40, 150]);
                truth.set(x, y, true);
            }
        }
        let opts = CompareOptions {
            k: 1,
            params: DetectParams {
                min_blob: 10,
                ..DetectParams::default()
            },
            ..CompareOptions::new("unused", "unused")
        };
        let rows = compare_image(&img, Some(&truth), &opts).unwrap();
        let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["kmeans", "manual_range", "mahalanobis", "mahalanobis_blobs"]);
        assert_eq!(rows[0].pixels, 400);
        assert_eq!(rows[1].label, "low=(128,40,0) high=(180,180,255)");
        assert_eq!((rows[3].precision, rows[3].recall), (Some(1.0), Some(1.0)));
        let csv = compare_csv(&rows);
        assert!(csv.starts_with("method,label,pixels,precision,recall\n"));
        assert!(csv.contains("manual_range,\"low=(128,40,0) high=(180,180,255)\",25,1,1\n"));
    }

    #[test]
    fn profile_rows_without_model() {
        let mut img = ImageRgb::filled(8, 8, [200, 200, 200]);
        for y in 0..8 {
            for x in 4..8 {
                img.put(x, y, [40, 40, 40]);
            }
        }
        let rows = baseline_profiles(&img, 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|(_, v)| v.len() == 8));
        assert_eq!(rows, baseline_profiles(&img, 3).unwrap());
        let csv = profile_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("raw_laplacian,"));
        assert!(baseline_profiles(&img, 8).is_err());
    }
}
