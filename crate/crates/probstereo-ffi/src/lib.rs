//! C ABI for the probstereo library.
//!
//! Opaque handles, integer status codes and caller-owned buffers; the header
//! is generated by cbindgen into `include/probstereo.h`. All functions are
//! panic-safe at the boundary. A model handle may be shared across threads
//! for prediction (the underlying network is immutable after load).

use probstereo::checkpoint::load_checkpoint;
use probstereo::data::StereoSample;
use probstereo::error::Error;
use probstereo::inference::uncertainty_stddev_maps;
use probstereo::network::StereoNet;
use probstereo::predict::predict_padded;
use probstereo::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    FormatError = 4,
    ConfigError = 5,
    ShapeError = 6,
    NumericError = 7,
    Panic = 8,
}

/// Opaque model handle; create with `ps_model_load`, release with
/// `ps_model_free`.
pub struct PsModel {
    net: StereoNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PsStatus {
    match err {
        Error::Io { .. } => PsStatus::IoError,
        Error::Parse { .. } | Error::Format { .. } | Error::Data(_) => PsStatus::FormatError,
        Error::Config(_) | Error::Parameter(_) => PsStatus::ConfigError,
        Error::Shape { .. } => PsStatus::ShapeError,
        Error::Numeric(_) => PsStatus::NumericError,
    }
}

fn guarded(f: impl FnOnce() -> PsStatus) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in probstereo".to_string());
            set_error(&msg);
            PsStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message of this thread into `buf` (truncated to
/// `len` bytes including the terminator). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be NULL (query mode).
#[no_mangle]
pub unsafe extern "C" fn ps_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            // always terminate
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Load a checkpoint from `path` into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_error("ps_model_load: NULL argument");
            return PsStatus::NullArgument;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => PathBuf::from(s),
            Err(_) => {
                set_error("ps_model_load: path is not valid UTF-8");
                return PsStatus::InvalidUtf8;
            }
        };
        match load_checkpoint(&path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(PsModel { net: ck.net }));
                PsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must come from `ps_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image channels the model expects (1 grayscale, 3 RGB).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_input_channels(model: *const PsModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).net.config.in_channels as u32
}

/// Disparity search range `D`; predictions lie in `[0, D-1]` pixels.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_max_disparity(model: *const PsModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).net.config.max_disparity as u32
}

/// Spatial granularity; images whose dims are not multiples of this are
/// reflection-padded internally and the outputs cropped back.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_spatial_multiple(model: *const PsModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).net.config.spatial_multiple() as u32
}

/// Monte-Carlo stereo prediction.
///
/// `left` and `right` are channel-major `channels x height x width` f32
/// buffers with intensities in `[0, 1]`. Each non-NULL output buffer
/// receives `height x width` row-major f32 values: the mean disparity in
/// pixels and the three uncertainty standard deviations in pixels.
/// `t` is the number of stochastic passes; `seed` makes the call
/// deterministic.
///
/// # Safety
/// Buffers must match the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn ps_predict(
    model: *const PsModel,
    left: *const f32,
    right: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    t: u32,
    seed: u64,
    out_disparity: *mut f32,
    out_aleatoric: *mut f32,
    out_epistemic: *mut f32,
    out_combined: *mut f32,
) -> PsStatus {
    guarded(|| {
        if model.is_null() || left.is_null() || right.is_null() {
            set_error("ps_predict: NULL argument");
            return PsStatus::NullArgument;
        }
        if height == 0 || width == 0 || channels == 0 {
            set_error("ps_predict: empty image dimensions");
            return PsStatus::ConfigError;
        }
        let net = &(*model).net;
        let n = channels * height * width;
        let to_tensor = |p: *const f32| -> Tensor {
            let slice = std::slice::from_raw_parts(p, n);
            Tensor::new(
                vec![channels, height, width],
                slice.iter().map(|&v| v as f64).collect(),
            )
        };
        let sample = StereoSample {
            left: to_tensor(left),
            right: to_tensor(right),
            gt_disparity: None,
            valid_mask: None,
        }
        .with_channels(net.config.in_channels);

        match predict_padded(net, &sample, t as usize, seed) {
            Ok(u) => {
                let (alea, epi, comb) = uncertainty_stddev_maps(&u);
                let write = |dst: *mut f32, src: &Tensor| {
                    if !dst.is_null() {
                        for (i, &v) in src.data().iter().enumerate() {
                            *dst.add(i) = v as f32;
                        }
                    }
                };
                write(out_disparity, &u.mean_disparity);
                write(out_aleatoric, &alea);
                write(out_epistemic, &epi);
                write(out_combined, &comb);
                PsStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
