//! C ABI over the costfilter pipeline.
//!
//! Every fallible call returns a [`CfStatus`]; on failure the message is
//! available from [`cf_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use costfilter::cli::RunConfig;
use costfilter::disparity::DisparityMap;
use costfilter::error::Error;
use costfilter::io::{read_disparity, write_disparity};
use costfilter::metrics::{evaluate, BadRule};
use costfilter::model::Model;
use costfilter::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Training = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfBadRule {
    Or = 0,
    And = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CfMetrics {
    pub epe: f64,
    pub bad1: f64,
    pub bad3: f64,
    pub pixels: usize,
}

/// Stereo model with loaded or initialized parameters.
pub struct CfModel {
    model: Model<f32>,
}

/// Dense disparity map with a per-pixel validity flag.
pub struct CfDisparity {
    map: DisparityMap<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (CfStatus, String);

fn status_of(e: &Error) -> CfStatus {
    match e {
        Error::Config(_) => CfStatus::Config,
        Error::Domain(_) | Error::Index(_) | Error::Format { .. } => CfStatus::Data,
        Error::Io { .. } => CfStatus::Io,
        Error::Training { .. } => CfStatus::Training,
    }
}

fn lift(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("interior NULs removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            CfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            CfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (CfStatus::NullArgument, format!("{what} is NULL"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from a JSON run configuration overlaid on the defaults
/// (`NULL` keeps the defaults). A `"weights"` key names the parameter file;
/// learned filters require it.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cf_model_new(config_json: *const c_char, out: *mut *mut CfModel) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = RunConfig::default();
        if !config_json.is_null() {
            cfg = cfg.merge_json(text(config_json, "config_json")?).map_err(lift)?;
        }
        let model = cfg.load_model().map_err(lift)?;
        put(out, CfModel { model });
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`cf_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of disparity hypotheses at full resolution.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_model_max_disp(model: *const CfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.max_disp)
}

/// Predicts a full-resolution disparity map. `left` and `right` hold
/// `channels·height·width` channels-first samples in `[0, 1]`.
///
/// # Safety
/// `model` must be a live handle, both image pointers must address
/// `channels·height·width` floats, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_match(
    model: *const CfModel,
    left: *const f32,
    right: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut CfDisparity,
) -> CfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if left.is_null() || right.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&n| n > 0)
            .ok_or_else(|| (CfStatus::InvalidArgument, "image dimensions are empty or overflow".to_string()))?;
        let image = |p: *const f32| Tensor::new(vec![channels, height, width], std::slice::from_raw_parts(p, n).to_vec()).map_err(lift);
        let map = model.model.predict(&image(left)?, &image(right)?).map_err(lift)?;
        put(out, CfDisparity { map });
        Ok(())
    })
}

/// Reads a disparity file (`.png` as KITTI 16-bit, otherwise PFM). PFM
/// values that are non-finite, negative or `>= max_disp` are invalid.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_read(path: *const c_char, max_disp: f32, out: *mut *mut CfDisparity) -> CfStatus {
    guard(|| {
        let p = PathBuf::from(text(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let map = read_disparity(&p, max_disp).map_err(lift)?;
        put(out, CfDisparity { map });
        Ok(())
    })
}

/// Writes a disparity file; the format follows the extension.
///
/// # Safety
/// `disp` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_write(disp: *const CfDisparity, path: *const c_char) -> CfStatus {
    guard(|| {
        let d = disp.as_ref().ok_or_else(|| null("disp"))?;
        write_disparity(&d.map, PathBuf::from(text(path, "path")?)).map_err(lift)
    })
}

/// # Safety
/// `disp` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_width(disp: *const CfDisparity) -> usize {
    disp.as_ref().map_or(0, |d| d.map.width())
}

/// # Safety
/// `disp` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_height(disp: *const CfDisparity) -> usize {
    disp.as_ref().map_or(0, |d| d.map.height())
}

/// Row-major values, `width·height` entries owned by the handle.
///
/// # Safety
/// `disp` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_values(disp: *const CfDisparity) -> *const f32 {
    disp.as_ref().map_or(ptr::null(), |d| d.map.values().as_ptr())
}

/// Row-major validity flags, `width·height` entries owned by the handle.
///
/// # Safety
/// `disp` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_valid(disp: *const CfDisparity) -> *const bool {
    disp.as_ref().map_or(ptr::null(), |d| d.map.valid().as_ptr())
}

/// # Safety
/// `disp` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_disparity_free(disp: *mut CfDisparity) {
    if !disp.is_null() {
        drop(Box::from_raw(disp));
    }
}

/// EPE and bad-1/bad-3 ratios of `pred` against the valid pixels of `gt`.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_evaluate(
    pred: *const CfDisparity,
    gt: *const CfDisparity,
    rule: CfBadRule,
    out: *mut CfMetrics,
) -> CfStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("pred"))?;
        let g = gt.as_ref().ok_or_else(|| null("gt"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !p.map.same_dims(&g.map) {
            return Err((CfStatus::Config, "prediction and ground truth differ in size".into()));
        }
        let rule = match rule {
            CfBadRule::Or => BadRule::Or,
            CfBadRule::And => BadRule::And,
        };
        let r = evaluate(&p.map, &g.map, None, rule).map_err(lift)?;
        *out = CfMetrics {
            epe: r.epe,
            bad1: r.bad1,
            bad3: r.bad3,
            pixels: r.evaluated_pixels,
        };
        Ok(())
    })
}
