//! C ABI over the `dtpn` detector: read feature pyramids, load checkpoints and
//! run detection from any language with a C FFI.
//!
//! All handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`DtpnStatus`]; on failure [`dtpn_last_error`] describes the problem on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dtpn::io_formats::{read_features, write_features};
use dtpn::model::{load_checkpoint, Dtpn};
use dtpn::postprocess::{detect_video, tiou, DetectParams, Detection, Interval};
use dtpn::sampling::PyramidFeature;
use dtpn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtpnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Shape = 6,
    Config = 7,
    Numeric = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// One detection in normalized time.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtpnDetection {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub label: u32,
}

pub struct DtpnPyramid {
    inner: PyramidFeature,
}

pub struct DtpnModel {
    inner: Dtpn<f32>,
}

pub struct DtpnDetections {
    items: Vec<DtpnDetection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DtpnStatus {
    match err {
        Error::Io { .. } => DtpnStatus::Io,
        Error::Json { .. } | Error::Format { .. } => DtpnStatus::Format,
        Error::Validation(_) => DtpnStatus::Validation,
        Error::Shape(_) => DtpnStatus::Shape,
        Error::Config(_) => DtpnStatus::Config,
        Error::Divergence { .. } | Error::GradCheck(_) => DtpnStatus::Numeric,
    }
}

struct Failure(DtpnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DtpnStatus::NullPointer, format!("{what} is NULL"))
}

/// Run `f`, turning errors and panics into a status plus thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtpnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtpnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DtpnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(DtpnStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dtpn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dtpn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_read(path: *const c_char, out: *mut *mut DtpnPyramid) -> DtpnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_features(&path_arg(path)?)?;
        put(out, DtpnPyramid { inner });
        Ok(())
    })
}

/// Build a pyramid from `len` floats holding every level back to back, level
/// `s` being `(base_segments << s) × dim` values in row-major order.
///
/// # Safety
/// `data` must point to `len` readable floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_from_data(
    dim: usize,
    scales: usize,
    base_segments: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut DtpnPyramid,
) -> DtpnStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if scales == 0 || scales > 24 || !base_segments.is_power_of_two() || dim == 0 {
            return Err(Failure(DtpnStatus::Config, "invalid pyramid header".into()));
        }
        let expected = base_segments * ((1usize << scales) - 1) * dim;
        if len != expected {
            return Err(Failure(
                DtpnStatus::Shape,
                format!("{len} floats given, header requires {expected}"),
            ));
        }
        let all = std::slice::from_raw_parts(data, len);
        let mut offset = 0;
        let levels = (0..scales)
            .map(|s| {
                let n = (base_segments << s) * dim;
                let level = all[offset..offset + n].to_vec();
                offset += n;
                level
            })
            .collect();
        let inner = PyramidFeature::new(dim, base_segments, levels)?;
        put(out, DtpnPyramid { inner });
        Ok(())
    })
}

/// # Safety
/// `pyramid` must be a live handle; output pointers may be NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_shape(
    pyramid: *const DtpnPyramid,
    dim: *mut usize,
    scales: *mut usize,
    base_segments: *mut usize,
) -> DtpnStatus {
    guard(|| {
        let p = &pyramid.as_ref().ok_or_else(|| null("pyramid"))?.inner;
        for (slot, v) in [(dim, p.dim()), (scales, p.scales()), (base_segments, p.base_segments())] {
            if !slot.is_null() {
                *slot = v;
            }
        }
        Ok(())
    })
}

/// Borrow level `scale` (zero-based). The data stays valid while the handle lives.
///
/// # Safety
/// `pyramid` must be a live handle, `data` and `rows` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_level(
    pyramid: *const DtpnPyramid,
    scale: usize,
    data: *mut *const f32,
    rows: *mut usize,
) -> DtpnStatus {
    guard(|| {
        let p = &pyramid.as_ref().ok_or_else(|| null("pyramid"))?.inner;
        if data.is_null() || rows.is_null() {
            return Err(null("output pointer"));
        }
        if scale >= p.scales() {
            return Err(Failure(
                DtpnStatus::OutOfRange,
                format!("scale {scale} out of range for {} scales", p.scales()),
            ));
        }
        *data = p.level(scale).as_ptr();
        *rows = p.rows(scale);
        Ok(())
    })
}

/// # Safety
/// `pyramid` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_write(pyramid: *const DtpnPyramid, path: *const c_char) -> DtpnStatus {
    guard(|| {
        let p = &pyramid.as_ref().ok_or_else(|| null("pyramid"))?.inner;
        write_features(&path_arg(path)?, p)?;
        Ok(())
    })
}

/// # Safety
/// `pyramid` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dtpn_pyramid_free(pyramid: *mut DtpnPyramid) {
    if !pyramid.is_null() {
        drop(Box::from_raw(pyramid));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtpn_model_load(path: *const c_char, out: *mut *mut DtpnModel) -> DtpnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_checkpoint(&path_arg(path)?)?;
        put(out, DtpnModel { inner });
        Ok(())
    })
}

/// Class count `M` and anchor count of a loaded model.
///
/// # Safety
/// `model` must be a live handle; output pointers may be NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn dtpn_model_info(
    model: *const DtpnModel,
    num_classes: *mut usize,
    num_anchors: *mut usize,
) -> DtpnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if !num_classes.is_null() {
            *num_classes = m.config().num_classes;
        }
        if !num_anchors.is_null() {
            *num_anchors = m.config().num_anchors();
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dtpn_model_free(model: *mut DtpnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Forward pass, decoding and class-wise NMS for one video.
///
/// # Safety
/// `model` and `pyramid` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtpn_detect(
    model: *const DtpnModel,
    pyramid: *const DtpnPyramid,
    nms_threshold: f64,
    top_k: usize,
    score_floor: f64,
    out: *mut *mut DtpnDetections,
) -> DtpnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let p = &pyramid.as_ref().ok_or_else(|| null("pyramid"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let params = DetectParams {
            nms_threshold,
            top_k,
            score_floor,
        };
        params.validate()?;
        let items = detect_video(p, m, &params)?
            .into_iter()
            .map(|d: Detection| DtpnDetection {
                start: d.start,
                end: d.end,
                score: d.score,
                label: d.label as u32,
            })
            .collect();
        put(out, DtpnDetections { items });
        Ok(())
    })
}

/// Number of detections, 0 for NULL.
///
/// # Safety
/// `dets` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtpn_detections_len(dets: *const DtpnDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Borrow the detections as a contiguous array of `dtpn_detections_len`
/// entries, sorted by descending score; NULL for NULL.
///
/// # Safety
/// `dets` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtpn_detections_data(dets: *const DtpnDetections) -> *const DtpnDetection {
    dets.as_ref().map_or(ptr::null(), |d| d.items.as_ptr())
}

/// # Safety
/// `dets` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtpn_detections_get(
    dets: *const DtpnDetections,
    index: usize,
    out: *mut DtpnDetection,
) -> DtpnStatus {
    guard(|| {
        let d = dets.as_ref().ok_or_else(|| null("detections"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = *d.items.get(index).ok_or_else(|| {
            Failure(
                DtpnStatus::OutOfRange,
                format!("index {index} out of range for {} detections", d.items.len()),
            )
        })?;
        Ok(())
    })
}

/// # Safety
/// `dets` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dtpn_detections_free(dets: *mut DtpnDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
#[no_mangle]
pub extern "C" fn dtpn_tiou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    tiou(&Interval::new(a_start, a_end), &Interval::new(b_start, b_end))
}
