//! C ABI over the capflow analysis pipeline.
//!
//! The API follows the usual handle pattern: construct a `CapflowAnalyzer`,
//! optionally point it at a config file and a trained classifier, feed it
//! frames (from a directory or a raw RGB8 buffer), and read summary values
//! off the returned `CapflowAnalysis` handle. Every handle has exactly one
//! `_free` function; strings returned as `char*` are released with
//! `capflow_string_free`.
//!
//! Functions that can fail either return a `CapflowStatus` or a null
//! pointer; in both cases `capflow_last_error` yields a message for the
//! calling thread, valid until that thread's next capflow call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use capflow::classifier::{self, CnnModel};
use capflow::config::PipelineConfig;
use capflow::pipeline::{self, Analysis};
use capflow::{frameio, Error, Frame};

/// Outcome of a capflow call that does not return a handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapflowStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was present but unusable (bad value, wrong range,
    /// malformed UTF-8 path).
    InvalidArgument = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// A file was read but its contents are corrupt or unsupported.
    Format = 4,
    /// The pipeline itself failed on otherwise valid input.
    Runtime = 5,
}

/// Configured entry point to the pipeline: holds the tuning parameters and
/// the optional patch classifier applied to region proposals.
pub struct CapflowAnalyzer {
    config: PipelineConfig,
    model: Option<CnnModel<f32>>,
}

/// Finished analysis of one video: per-capillary records plus video-level
/// densities, queried through the `capflow_analysis_*` accessors.
pub struct CapflowAnalysis {
    inner: Analysis,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn status_of(err: &Error) -> CapflowStatus {
    match err {
        Error::Io(_) => CapflowStatus::Io,
        Error::Format(_) => CapflowStatus::Format,
        Error::Parameter(_) => CapflowStatus::InvalidArgument,
        Error::State(_) | Error::Training(_) | Error::UndefinedRecord(_) => CapflowStatus::Runtime,
    }
}

/// # Safety
/// `ptr` must be null or point at a NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, CapflowStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(CapflowStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) if !s.is_empty() => Ok(PathBuf::from(s)),
        Ok(_) => {
            set_error(format!("{what} is empty"));
            Err(CapflowStatus::InvalidArgument)
        }
        Err(_) => {
            set_error(format!("{what} is not valid UTF-8"));
            Err(CapflowStatus::InvalidArgument)
        }
    }
}

fn run_analysis(
    analyzer: &CapflowAnalyzer,
    frames: &[Frame],
) -> Result<*mut CapflowAnalysis, ()> {
    let result = catch_unwind(AssertUnwindSafe(|| {
        pipeline::analyze(frames, &analyzer.config, analyzer.model.as_ref())
    }));
    match result {
        Ok(Ok(inner)) => Ok(Box::into_raw(Box::new(CapflowAnalysis { inner }))),
        Ok(Err(e)) => {
            set_error(e.to_string());
            Err(())
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".to_string());
            set_error(format!("analysis aborted: {msg}"));
            Err(())
        }
    }
}

/// Library version as a static NUL-terminated string. Never null; do not
/// free.
#[no_mangle]
pub extern "C" fn capflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last error raised by a capflow call on the calling
/// thread, or an empty string. The pointer stays valid until this thread's
/// next capflow call. Never null; do not free.
#[no_mangle]
pub extern "C" fn capflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates an analyzer. `config_path` may be null for built-in defaults, or
/// name a TOML tuning file. Returns null on failure. Release with
/// `capflow_analyzer_free`.
///
/// # Safety
/// `config_path` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn capflow_analyzer_new(config_path: *const c_char) -> *mut CapflowAnalyzer {
    clear_error();
    let config = if config_path.is_null() {
        PipelineConfig::default()
    } else {
        let path = match path_arg(config_path, "config path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        let loaded = PipelineConfig::load(&path).and_then(|c| c.validate().map(|()| c));
        match loaded {
            Ok(c) => c,
            Err(e) => {
                set_error(format!("loading config {}: {e}", path.display()));
                return ptr::null_mut();
            }
        }
    };
    Box::into_raw(Box::new(CapflowAnalyzer { config, model: None }))
}

/// Loads a trained patch classifier into the analyzer; subsequent analyses
/// keep only region proposals the classifier accepts.
///
/// # Safety
/// `analyzer` must come from `capflow_analyzer_new` and not be freed;
/// `model_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn capflow_analyzer_set_model(
    analyzer: *mut CapflowAnalyzer,
    model_path: *const c_char,
) -> CapflowStatus {
    clear_error();
    let Some(analyzer) = analyzer.as_mut() else {
        set_error("analyzer is null");
        return CapflowStatus::NullArgument;
    };
    let path = match path_arg(model_path, "model path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match classifier::load_model_file(&path) {
        Ok(model) => {
            analyzer.model = Some(model);
            CapflowStatus::Ok
        }
        Err(e) => {
            let status = status_of(&e);
            set_error(format!("loading model {}: {e}", path.display()));
            status
        }
    }
}

/// Releases an analyzer. Null is ignored.
///
/// # Safety
/// `analyzer` must be null or a pointer from `capflow_analyzer_new` that
/// has not already been freed.
#[no_mangle]
pub unsafe extern "C" fn capflow_analyzer_free(analyzer: *mut CapflowAnalyzer) {
    if !analyzer.is_null() {
        drop(Box::from_raw(analyzer));
    }
}

/// Analyzes a directory of frames named `frame_%06d` (PNG or binary PPM).
/// Returns a new analysis handle, or null on failure. Release with
/// `capflow_analysis_free`.
///
/// # Safety
/// `analyzer` must be a live analyzer handle; `frames_dir` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn capflow_analyze_dir(
    analyzer: *const CapflowAnalyzer,
    frames_dir: *const c_char,
) -> *mut CapflowAnalysis {
    clear_error();
    let Some(analyzer) = analyzer.as_ref() else {
        set_error("analyzer is null");
        return ptr::null_mut();
    };
    let dir = match path_arg(frames_dir, "frames directory") {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    let frames = match frameio::load_frames(&dir) {
        Ok(f) => f,
        Err(e) => {
            set_error(format!("loading frames from {}: {e}", dir.display()));
            return ptr::null_mut();
        }
    };
    run_analysis(analyzer, &frames).unwrap_or(ptr::null_mut())
}

/// Analyzes `frame_count` frames of packed 8-bit RGB pixels (frame-major,
/// rows top to bottom, no padding between rows or frames). `pixels` must
/// hold `width * height * 3 * frame_count` bytes. Returns a new analysis
/// handle, or null on failure. Release with `capflow_analysis_free`.
///
/// # Safety
/// `analyzer` must be a live analyzer handle and `pixels` must point at at
/// least the stated number of readable bytes.
#[no_mangle]
pub unsafe extern "C" fn capflow_analyze_rgb8(
    analyzer: *const CapflowAnalyzer,
    pixels: *const u8,
    width: usize,
    height: usize,
    frame_count: usize,
) -> *mut CapflowAnalysis {
    clear_error();
    let Some(analyzer) = analyzer.as_ref() else {
        set_error("analyzer is null");
        return ptr::null_mut();
    };
    if pixels.is_null() {
        set_error("pixels is null");
        return ptr::null_mut();
    }
    let frame_len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n > 0);
    let total_len = frame_len.and_then(|n| n.checked_mul(frame_count)).filter(|&n| n > 0);
    let (Some(frame_len), Some(total_len)) = (frame_len, total_len) else {
        set_error(format!(
            "bad buffer shape: {width}x{height}x3 by {frame_count} frames"
        ));
        return ptr::null_mut();
    };

    let raw = slice::from_raw_parts(pixels, total_len);
    let plane = width * height;
    let mut frames = Vec::with_capacity(frame_count);
    for chunk in raw.chunks_exact(frame_len) {
        let mut data = vec![0.0f32; frame_len];
        for (i, px) in chunk.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + i] = f32::from(v) / 255.0;
            }
        }
        match Frame::new(width, height, 3, data) {
            Ok(f) => frames.push(f),
            Err(e) => {
                set_error(e.to_string());
                return ptr::null_mut();
            }
        }
    }
    run_analysis(analyzer, &frames).unwrap_or(ptr::null_mut())
}

/// Number of frames the analysis covered. Zero if `analysis` is null.
///
/// # Safety
/// `analysis` must be null or a live analysis handle.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_frame_count(analysis: *const CapflowAnalysis) -> usize {
    analysis.as_ref().map_or(0, |a| a.inner.frame_count)
}

/// Number of capillaries tracked through the video. Zero if `analysis` is
/// null.
///
/// # Safety
/// `analysis` must be null or a live analysis handle.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_capillary_count(
    analysis: *const CapflowAnalysis,
) -> usize {
    analysis.as_ref().map_or(0, |a| a.inner.records.len())
}

/// Fraction of the field of view covered by detected capillaries, in
/// [0, 1]. Zero if `analysis` is null.
///
/// # Safety
/// `analysis` must be null or a live analysis handle.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_total_density(analysis: *const CapflowAnalysis) -> f32 {
    analysis.as_ref().map_or(0.0, |a| a.inner.total_density)
}

/// Like `capflow_analysis_total_density`, but counting only capillaries
/// with measurable flow.
///
/// # Safety
/// `analysis` must be null or a live analysis handle.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_functional_density(
    analysis: *const CapflowAnalysis,
) -> f32 {
    analysis.as_ref().map_or(0.0, |a| a.inner.functional_density)
}

/// Full report as a JSON document. `video_id` may be null (a placeholder id
/// is used); `fps` is the capture rate recorded in the report. Returns a
/// newly allocated string to release with `capflow_string_free`, or null on
/// failure.
///
/// # Safety
/// `analysis` must be a live analysis handle; `video_id` must be null or a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_report_json(
    analysis: *const CapflowAnalysis,
    video_id: *const c_char,
    fps: f32,
) -> *mut c_char {
    clear_error();
    let Some(analysis) = analysis.as_ref() else {
        set_error("analysis is null");
        return ptr::null_mut();
    };
    let id = if video_id.is_null() {
        "video".to_string()
    } else {
        match CStr::from_ptr(video_id).to_str() {
            Ok(s) => s.to_string(),
            Err(_) => {
                set_error("video id is not valid UTF-8");
                return ptr::null_mut();
            }
        }
    };
    if !fps.is_finite() || fps <= 0.0 {
        set_error(format!("fps must be positive and finite, got {fps}"));
        return ptr::null_mut();
    }
    let report = analysis.inner.report(&id, fps);
    if let Err(e) = report.validate() {
        set_error(format!("report failed schema validation: {e}"));
        return ptr::null_mut();
    }
    match CString::new(report.to_json()) {
        Ok(s) => s.into_raw(),
        Err(_) => {
            set_error("report contained an interior NUL byte");
            ptr::null_mut()
        }
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer returned by a capflow function that
/// documents `capflow_string_free`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn capflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases an analysis handle. Null is ignored.
///
/// # Safety
/// `analysis` must be null or a pointer from an analyze call that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn capflow_analysis_free(analysis: *mut CapflowAnalysis) {
    if !analysis.is_null() {
        drop(Box::from_raw(analysis));
    }
}
