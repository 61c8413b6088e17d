//! C ABI over `hvpp-core`.
//!
//! Every function returns an [`HvppStatus`]; on failure a message is stored
//! per thread and can be read with [`hvpp_last_error`]. Models are opaque
//! handles owned by the caller and released with [`hvpp_model_free`].
//! Panics never cross the boundary; they surface as `HVPP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use hvpp_core::bdrate::{bd_rate, RdCurve, RdPoint};
use hvpp_core::checkpoint::load_checkpoint;
use hvpp_core::metrics::{ms_ssim, psnr};
use hvpp_core::network::{enhance_frame, ParameterStore};
use hvpp_core::yuv::{Yuv420Frame, MAX_QP};
use hvpp_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Format = 5,
    Domain = 6,
    Config = 7,
    Manifest = 8,
    NonFiniteGradient = 9,
    Panic = 10,
}

impl From<&Error> for HvppStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => HvppStatus::InvalidArgument,
            Error::OutOfRange(_) => HvppStatus::OutOfRange,
            Error::Io(_) => HvppStatus::Io,
            Error::Format(_) => HvppStatus::Format,
            Error::Domain(_) => HvppStatus::Domain,
            Error::Config(_) => HvppStatus::Config,
            Error::Manifest { .. } => HvppStatus::Manifest,
            Error::NonFiniteGradient(_) => HvppStatus::NonFiniteGradient,
        }
    }
}

/// Opaque handle to a loaded model.
pub struct HvppModel {
    params: ParameterStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(HvppStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(HvppStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HvppStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HvppStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HvppStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(HvppStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HvppStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn hvpp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hvpp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint. On success `*out` receives a handle to free with
/// [`hvpp_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hvpp_model_load(path: *const c_char, out: *mut *mut HvppModel) -> HvppStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let params = load_checkpoint(path)?;
        let handle = Box::into_raw(Box::new(HvppModel { params }));
        // SAFETY: checked non-null; the caller guarantees it is writable.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hvpp_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hvpp_model_free(model: *mut HvppModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller, per the contract above.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of scalar parameters of a model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hvpp_model_num_params(model: *const HvppModel, out: *mut usize) -> HvppStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        // SAFETY: both checked non-null and valid per the contract.
        unsafe { *out = (*model).params.num_params() };
        Ok(())
    })
}

/// Enhance one planar 8-bit 4:2:0 frame (Y then U then V, no padding).
/// `input` and `output` each hold `width * height * 3 / 2` bytes and may
/// alias.
///
/// # Safety
/// `model` must be a live handle. `input` must be readable and `output`
/// writable for the frame size.
#[no_mangle]
pub unsafe extern "C" fn hvpp_model_enhance_i420(
    model: *const HvppModel,
    input: *const u8,
    output: *mut u8,
    width: usize,
    height: usize,
    qp: u32,
) -> HvppStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(input, "input")?;
        non_null(output, "output")?;
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(invalid(format!("{width}x{height} is not a positive even size")));
        }
        if qp > MAX_QP as u32 {
            return Err(Fail(HvppStatus::OutOfRange, format!("qp {qp} exceeds {MAX_QP}")));
        }
        let luma = width * height;
        let chroma = luma / 4;
        // SAFETY: the caller guarantees `input` covers the frame size; the
        // bytes are copied before `output` is written, so aliasing is fine.
        let bytes = unsafe { slice::from_raw_parts(input, luma + 2 * chroma) }.to_vec();
        let frame = Yuv420Frame::new(
            width,
            height,
            bytes[..luma].to_vec(),
            bytes[luma..luma + chroma].to_vec(),
            bytes[luma + chroma..].to_vec(),
        )?;
        // SAFETY: live handle per the contract.
        let params = unsafe { &(*model).params };
        let out = enhance_frame(params, &frame, qp as u8)?;
        // SAFETY: the caller guarantees `output` covers the frame size.
        let dst = unsafe { slice::from_raw_parts_mut(output, luma + 2 * chroma) };
        dst[..luma].copy_from_slice(&out.y);
        dst[luma..luma + chroma].copy_from_slice(&out.u);
        dst[luma + chroma..].copy_from_slice(&out.v);
        Ok(())
    })
}

/// PSNR in dB of two 8-bit planes of `len` samples; `+inf` when identical.
///
/// # Safety
/// `reference` and `test` must be readable for `len` bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvpp_psnr(
    reference: *const u8,
    test: *const u8,
    len: usize,
    peak: f64,
    out: *mut f64,
) -> HvppStatus {
    guard(|| {
        non_null(reference, "reference")?;
        non_null(test, "test")?;
        non_null(out, "out")?;
        // SAFETY: the caller guarantees both buffers hold `len` bytes.
        let (a, b) = unsafe { (slice::from_raw_parts(reference, len), slice::from_raw_parts(test, len)) };
        let v = psnr(a, b, peak)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// MS-SSIM of two `width x height` 8-bit planes.
///
/// # Safety
/// `reference` and `test` must be readable for `width * height` bytes;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvpp_ms_ssim(
    reference: *const u8,
    test: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> HvppStatus {
    guard(|| {
        non_null(reference, "reference")?;
        non_null(test, "test")?;
        non_null(out, "out")?;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| invalid("plane size overflows"))?;
        // SAFETY: the caller guarantees both buffers hold `width * height` bytes.
        let (a, b) = unsafe { (slice::from_raw_parts(reference, n), slice::from_raw_parts(test, n)) };
        let v = ms_ssim(a, b, width, height)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// # Safety
/// `rates` and `quality` readable for `n` values each (or `n == 0`).
unsafe fn curve(label: &str, rates: *const f64, quality: *const f64, n: usize) -> Result<RdCurve, Fail> {
    if n == 0 {
        return Err(invalid(format!("{label} curve is empty")));
    }
    non_null(rates, label)?;
    non_null(quality, label)?;
    // SAFETY: forwarded from the caller's contract.
    let (r, q) = unsafe { (slice::from_raw_parts(rates, n), slice::from_raw_parts(quality, n)) };
    let pts = r.iter().zip(q).map(|(&bitrate, &quality)| RdPoint { bitrate, quality }).collect();
    Ok(RdCurve::from_unsorted(label, pts)?)
}

/// BD-rate in percent of the test curve against the anchor. Points may be
/// given in any order.
///
/// # Safety
/// Each rate/quality array must be readable for its count; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hvpp_bd_rate(
    anchor_rates: *const f64,
    anchor_quality: *const f64,
    anchor_len: usize,
    test_rates: *const f64,
    test_quality: *const f64,
    test_len: usize,
    out: *mut f64,
) -> HvppStatus {
    guard(|| {
        non_null(out, "out")?;
        // SAFETY: forwarded from the caller's contract.
        let anchor = unsafe { curve("anchor", anchor_rates, anchor_quality, anchor_len) }?;
        // SAFETY: as above.
        let test = unsafe { curve("test", test_rates, test_quality, test_len) }?;
        let v = bd_rate(&anchor, &test)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}
