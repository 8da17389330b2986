//! C ABI over the core library.
//!
//! Every fallible function returns an [`SseStatus`]; on failure the message
//! is available from [`sse_last_error`] on the same thread. Handles are
//! opaque and owned by the caller until passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sae_sensitivity::linalg::Matrix;
use sae_sensitivity::overlap::{lcs_prefix, lcs_tokens};
use sae_sensitivity::sae::{max_decoder_cosine, SaeError, SaeModel};
use sae_sensitivity::stats::{spearman, StatsError};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    OutOfRange = 6,
    Undefined = 7,
    Panic = 8,
}

/// A loaded sparse autoencoder.
pub struct SseSae {
    model: SaeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).unwrap_or_default());
}

fn fail(status: SseStatus, message: impl Into<String>) -> SseStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> SseStatus) -> SseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == SseStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => fail(SseStatus::Panic, "internal panic"),
    }
}

fn sae_status(e: &SaeError) -> SseStatus {
    match e {
        SaeError::Io { .. } => SseStatus::Io,
        SaeError::Shape { .. } => SseStatus::Shape,
        SaeError::FeatureOutOfRange { .. } => SseStatus::OutOfRange,
        SaeError::UndefinedMetric(_) => SseStatus::Undefined,
        _ => SseStatus::Format,
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if data.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(data, len))
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an SAE from a safetensors file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_load(path: *const c_char, out: *mut *mut SseSae) -> SseStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(SseStatus::NullPointer, "path and out must not be null");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(SseStatus::InvalidArgument, "path is not UTF-8");
        };
        match SaeModel::load(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SseSae { model }));
                SseStatus::Ok
            }
            Err(e) => fail(sae_status(&e), e.to_string()),
        }
    })
}

/// Releases a handle from [`sse_sae_load`]. Null is ignored.
///
/// # Safety
/// `sae` must come from `sse_sae_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_free(sae: *mut SseSae) {
    if !sae.is_null() {
        drop(Box::from_raw(sae));
    }
}

/// Number of features, or 0 for a null handle.
///
/// # Safety
/// `sae` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_width(sae: *const SseSae) -> usize {
    sae.as_ref().map_or(0, |s| s.model.width)
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `sae` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_d_model(sae: *const SseSae) -> usize {
    sae.as_ref().map_or(0, |s| s.model.d_model)
}

/// Encodes `n_tokens` row-major rows of `d_model` floats into
/// `n_tokens * width` feature activations written to `output`.
///
/// # Safety
/// `input` must hold `n_tokens * d_model` floats and `output` `output_len`.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_encode(
    sae: *const SseSae,
    input: *const f32,
    n_tokens: usize,
    d_model: usize,
    output: *mut f32,
    output_len: usize,
) -> SseStatus {
    guard(|| {
        let Some(sae) = sae.as_ref() else {
            return fail(SseStatus::NullPointer, "sae must not be null");
        };
        let m = &sae.model;
        if d_model != m.d_model {
            return fail(
                SseStatus::Shape,
                format!("input has d_model {d_model}, SAE expects {}", m.d_model),
            );
        }
        let Some(n_in) = n_tokens.checked_mul(d_model) else {
            return fail(SseStatus::InvalidArgument, "input size overflows");
        };
        let Some(n_out) = n_tokens.checked_mul(m.width) else {
            return fail(SseStatus::InvalidArgument, "output size overflows");
        };
        if output_len < n_out {
            return fail(
                SseStatus::Shape,
                format!("output holds {output_len} floats, {n_out} needed"),
            );
        }
        let Some(x) = slice(input, n_in) else {
            return fail(SseStatus::NullPointer, "input must not be null");
        };
        if output.is_null() && n_out > 0 {
            return fail(SseStatus::NullPointer, "output must not be null");
        }
        let x = Matrix::from_vec(n_tokens, d_model, x.to_vec()).expect("length checked");
        match m.encode(&x) {
            Ok(z) => {
                if n_out > 0 {
                    std::slice::from_raw_parts_mut(output, n_out).copy_from_slice(z.as_slice());
                }
                SseStatus::Ok
            }
            Err(e) => fail(sae_status(&e), e.to_string()),
        }
    })
}

/// Largest cosine similarity between `feature`'s decoder row and any other.
///
/// # Safety
/// `sae` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sse_sae_max_decoder_cosine(
    sae: *const SseSae,
    feature: u32,
    out: *mut f64,
) -> SseStatus {
    guard(|| {
        let (Some(sae), false) = (sae.as_ref(), out.is_null()) else {
            return fail(SseStatus::NullPointer, "sae and out must not be null");
        };
        match max_decoder_cosine(&sae.model, feature) {
            Ok(v) => {
                *out = v;
                SseStatus::Ok
            }
            Err(e) => fail(sae_status(&e), e.to_string()),
        }
    })
}

/// Length of the longest common contiguous run of token ids.
///
/// # Safety
/// `a` and `b` must hold `a_len` and `b_len` ids (null allowed when empty).
#[no_mangle]
pub unsafe extern "C" fn sse_lcs(
    a: *const u32,
    a_len: usize,
    b: *const u32,
    b_len: usize,
    out: *mut usize,
) -> SseStatus {
    guard(|| match (slice(a, a_len), slice(b, b_len), out.is_null()) {
        (Some(a), Some(b), false) => {
            *out = lcs_tokens(a, b);
            SseStatus::Ok
        }
        _ => fail(SseStatus::NullPointer, "token arrays and out must not be null"),
    })
}

/// Longest common run between `b` and substrings of `a` that end at or
/// before index `last` (the last activating token of an example).
///
/// # Safety
/// Same as [`sse_lcs`].
#[no_mangle]
pub unsafe extern "C" fn sse_lcs_ending_at(
    a: *const u32,
    a_len: usize,
    last: usize,
    b: *const u32,
    b_len: usize,
    out: *mut usize,
) -> SseStatus {
    guard(|| {
        if last >= a_len {
            return fail(SseStatus::OutOfRange, format!("last {last} outside example of {a_len} tokens"));
        }
        match (slice(a, a_len), slice(b, b_len), out.is_null()) {
            (Some(a), Some(b), false) => {
                *out = lcs_prefix(a, last, b);
                SseStatus::Ok
            }
            _ => fail(SseStatus::NullPointer, "token arrays and out must not be null"),
        }
    })
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must hold `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sse_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> SseStatus {
    guard(|| {
        let (Some(x), Some(y), false) = (slice(x, n), slice(y, n), out.is_null()) else {
            return fail(SseStatus::NullPointer, "x, y and out must not be null");
        };
        match spearman(x, y) {
            Ok(rho) => {
                *out = rho;
                SseStatus::Ok
            }
            Err(e @ (StatsError::TooFew(_) | StatsError::NaN)) => fail(SseStatus::InvalidArgument, e.to_string()),
            Err(e) => fail(SseStatus::Undefined, e.to_string()),
        }
    })
}
