//! C ABI over the hemoscan library.
//!
//! Conventions:
//! - Every fallible function returns an [`HsStatus`]; on failure a message is
//!   available from [`hs_last_error_message`] on the same thread.
//! - Objects are opaque handles created by `*_load`/`hs_detect` and released
//!   with the matching `*_free`. Freeing a null handle is a no-op.
//! - Strings returned through out-parameters are owned by the caller and must
//!   be released with [`hs_string_free`].
//! - Images are row-major; RGB buffers hold `3·h·w` bytes, grayscale buffers
//!   `h·w` floats.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hemoscan::chroma::{self, Connectivity, DEFAULT_ALPHA, DEFAULT_MIN_BLOB};
use hemoscan::pipeline::commands::predict_boundary_any_size;
use hemoscan::pipeline::{detect_image, DetectParams, DetectionReport};
use hemoscan::unet::{load_model, Unet};
use hemoscan::{Error, ImageGray, ImageRgb};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    DegenerateImage = 5,
    Format = 6,
    UnsupportedVersion = 7,
    Io = 8,
    Image = 9,
    Serialization = 10,
    Panic = 11,
}

impl From<&Error> for HsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => HsStatus::Dimension,
            Error::Argument(_) | Error::Dataset(_) => HsStatus::InvalidArgument,
            Error::Config(_) => HsStatus::Config,
            Error::DegenerateImage(_) => HsStatus::DegenerateImage,
            Error::Format { .. } => HsStatus::Format,
            Error::UnsupportedVersion { .. } => HsStatus::UnsupportedVersion,
            Error::File { .. } | Error::Io(_) => HsStatus::Io,
            Error::Image { .. } => HsStatus::Image,
            Error::Json(_) => HsStatus::Serialization,
        }
    }
}

/// Trained boundary network.
pub struct HsModel(Unet);

/// Detection verdict for one image.
pub struct HsReport(DetectionReport);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsHsv {
    /// Degrees in [0, 360).
    pub h: f64,
    /// In [0, 1].
    pub s: f64,
    /// In [0, 255].
    pub v: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsDetectParams {
    /// Chi-square significance level in (0, 1].
    pub alpha: f64,
    /// Smallest component kept, in pixels.
    pub min_blob: usize,
    /// 4 or 8.
    pub connectivity: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsComponent {
    pub id: usize,
    pub pixels: usize,
    pub bbox_x: usize,
    pub bbox_y: usize,
    pub bbox_w: usize,
    pub bbox_h: usize,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub mean_d2: f64,
    pub max_d2: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(HsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(HsStatus::from(&e), e.to_string())
    }
}

fn fail(status: HsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            HsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(HsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HsStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn pixel_count(h: usize, w: usize, channels: usize) -> Result<usize, Failure> {
    if h == 0 || w == 0 {
        return Err(fail(HsStatus::Dimension, format!("image size {h}x{w} is empty")));
    }
    h.checked_mul(w)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| fail(HsStatus::Dimension, format!("image size {h}x{w} overflows")))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string obtained from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_model_load(path: *const c_char, out: *mut *mut HsModel) -> HsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = load_model(path)?;
        *out = Box::into_raw(Box::new(HsModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`hs_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hs_model_free(model: *mut HsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side of the square tile the model was trained on; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_model_input_size(model: *const HsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().input_size)
}

/// Parameter checksum of the model; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_model_checksum(model: *const HsModel) -> u64 {
    model.as_ref().map_or(0, |m| m.0.checksum())
}

/// Boundary map of a grayscale image of any size, written to `out` (`h·w`
/// floats in [0, 1]). Images other than the model tile size are resized to
/// the tile and the result resized back.
///
/// # Safety
/// `gray` must point to `h·w` floats and `out` to `h·w` writable floats.
#[no_mangle]
pub unsafe extern "C" fn hs_model_predict_boundary(
    model: *const HsModel,
    gray: *const f32,
    h: usize,
    w: usize,
    out: *mut f32,
) -> HsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(gray, "gray")?;
        non_null(out, "out")?;
        let n = pixel_count(h, w, 1)?;
        let img = ImageGray::new(h, w, std::slice::from_raw_parts(gray, n).to_vec())?;
        let b = predict_boundary_any_size(&(*model).0, &img)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&b.pixels);
        Ok(())
    })
}

/// Default detection parameters.
#[no_mangle]
pub extern "C" fn hs_detect_params_default() -> HsDetectParams {
    HsDetectParams {
        alpha: DEFAULT_ALPHA,
        min_blob: DEFAULT_MIN_BLOB,
        connectivity: 8,
    }
}

/// Runs chromatic detection on an RGB image. `params` and `name` may be null
/// for the defaults and an empty name.
///
/// # Safety
/// `rgb` must point to `3·h·w` bytes; `params` and `name` must be null or
/// valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_detect(
    rgb: *const u8,
    h: usize,
    w: usize,
    params: *const HsDetectParams,
    name: *const c_char,
    out: *mut *mut HsReport,
) -> HsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(rgb, "rgb")?;
        let n = pixel_count(h, w, 3)?;
        let p = params.as_ref().copied().unwrap_or_else(|| hs_detect_params_default());
        let connectivity = Connectivity::try_from(p.connectivity)?;
        let name = if name.is_null() { "" } else { str_arg(name, "name")? };
        let img = ImageRgb::new(h, w, std::slice::from_raw_parts(rgb, n).to_vec())?;
        let params = DetectParams {
            alpha: p.alpha,
            min_blob: p.min_blob,
            connectivity,
        };
        let report = detect_image(name, &img, &params)?;
        *out = Box::into_raw(Box::new(HsReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle from [`hs_detect`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hs_report_free(report: *mut HsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Whether any component survived; false for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_report_infected(report: *const HsReport) -> bool {
    report.as_ref().is_some_and(|r| r.0.infected)
}

/// Chi-square gate used for the report; NaN for a null handle.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_report_threshold(report: *const HsReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.threshold)
}

/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hs_report_component_count(report: *const HsReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.components.len())
}

/// Copies component `index` (0-based, largest first) into `out`.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_report_component(report: *const HsReport, index: usize, out: *mut HsComponent) -> HsStatus {
    guard(|| {
        non_null(report, "report")?;
        non_null(out, "out")?;
        let comps = &(*report).0.components;
        let c = comps.get(index).ok_or_else(|| {
            fail(
                HsStatus::InvalidArgument,
                format!("component index {index} out of range (report has {})", comps.len()),
            )
        })?;
        *out = HsComponent {
            id: c.id,
            pixels: c.pixels,
            bbox_x: c.bbox[0],
            bbox_y: c.bbox[1],
            bbox_w: c.bbox[2],
            bbox_h: c.bbox[3],
            centroid_x: c.centroid[0],
            centroid_y: c.centroid[1],
            mean_d2: c.mean_d2,
            max_d2: c.max_d2,
        };
        Ok(())
    })
}

/// Serializes the report as JSON. Release the string with [`hs_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hs_report_to_json(report: *const HsReport, out: *mut *mut c_char) -> HsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(report, "report")?;
        let json = serde_json::to_string(&(*report).0).map_err(Error::from)?;
        *out = CString::new(json)
            .map_err(|_| fail(HsStatus::Serialization, "report JSON contains a nul byte"))?
            .into_raw();
        Ok(())
    })
}

/// HSV transform of one pixel.
#[no_mangle]
pub extern "C" fn hs_rgb_to_hsv(r: u8, g: u8, b: u8) -> HsHsv {
    let p = chroma::rgb_to_hsv(r, g, b);
    HsHsv { h: p.h, s: p.s, v: p.v }
}

/// Chi-square (2 degrees of freedom) critical value at significance `alpha`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hs_chi2_threshold(alpha: f64, out: *mut f64) -> HsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = chroma::chi2_threshold(alpha)?;
        Ok(())
    })
}
