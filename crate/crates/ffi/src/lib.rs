//! C ABI for the facade-risk library.
//!
//! Every fallible function returns an [`FrStatus`]; on failure the message is
//! available from [`fr_last_error_message`] on the same thread. Output
//! pointers are written only on success. Models are opaque handles created by
//! [`fr_model_load`] and released with [`fr_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use facade_risk::error::Error;
use facade_risk::model::{checkpoint, MultiTaskModel, Prediction};
use facade_risk::rules::{fireproof_class, BuildingStructure, PropertyType};
use facade_risk::{dedup, evaluate, model};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ImageDecode = 4,
    Checkpoint = 5,
    NonFinite = 6,
    ShapeMismatch = 7,
    Panic = 99,
}

/// Building structure codes; match the order of probability rows.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrStructure {
    ConcreteLike = 0,
    SteelLike = 1,
    WoodenLike = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrPropertyType {
    Communal = 0,
    NonCommunal = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrFireproof {
    H = 0,
    T = 1,
    M = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrPrediction {
    /// Gregorian construction year.
    pub year: f64,
    /// An [`FrStructure`] code.
    pub structure: u32,
    /// An [`FrPropertyType`] code.
    pub ptype: u32,
    /// An [`FrFireproof`] code.
    pub fireproof: u32,
    pub structure_probs: [f32; 3],
    pub ptype_probs: [f32; 2],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrRegression {
    pub mae: f64,
    pub rmse: f64,
    pub medae: f64,
    pub n: usize,
}

/// Opaque trained model.
pub struct FrModel {
    inner: MultiTaskModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FrStatus {
    match err {
        Error::Io { .. } => FrStatus::Io,
        Error::ImageDecode { .. } => FrStatus::ImageDecode,
        Error::Checkpoint(_) => FrStatus::Checkpoint,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => FrStatus::NonFinite,
        Error::ShapeMismatch { .. } => FrStatus::ShapeMismatch,
        _ => FrStatus::InvalidArgument,
    }
}

fn fail(status: FrStatus, message: impl Into<String>) -> FrStatus {
    set_error(message.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), FrStatus>) -> FrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FrStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(FrStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> FrStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, FrStatus> {
    if p.is_null() {
        return Err(fail(FrStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FrStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], FrStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FrStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FrStatus> {
    // SAFETY: callers pass either null or a valid, writable, aligned pointer.
    unsafe { p.as_mut() }.ok_or_else(|| fail(FrStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn fr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fireproof class for a (structure, property type) pair given as codes.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fr_fireproof_class(structure: u32, ptype: u32, out: *mut u32) -> FrStatus {
    guard(|| {
        let s = BuildingStructure::from_index(structure as usize)
            .ok_or_else(|| fail(FrStatus::InvalidArgument, format!("unknown structure code {structure}")))?;
        let p = PropertyType::from_index(ptype as usize)
            .ok_or_else(|| fail(FrStatus::InvalidArgument, format!("unknown property type code {ptype}")))?;
        *out_arg(out, "out")? = fireproof_class(s, p).index() as u32;
        Ok(())
    })
}

/// Uncertainty-weighted loss `sum L_i / (2 exp(s_i)) + s_i / 2` over `n` tasks.
///
/// # Safety
/// `losses` and `log_var` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_combined_loss(
    losses: *const f64,
    log_var: *const f64,
    n: usize,
    out: *mut f64,
) -> FrStatus {
    guard(|| {
        let l = slice_arg(losses, n, "losses")?;
        let s = slice_arg(log_var, n, "log_var")?;
        *out_arg(out, "out")? = model::combined_loss(l, s).map_err(lib_err)?;
        Ok(())
    })
}

/// 64-bit perceptual hash of an image file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_phash_file(path: *const c_char, out: *mut u64) -> FrStatus {
    guard(|| {
        let p = path_arg(path)?;
        *out_arg(out, "out")? = dedup::phash_file(&p).map_err(lib_err)?.0;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn fr_hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// MAE, RMSE and MedAE over `n` paired values.
///
/// # Safety
/// `preds` and `truths` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_regression_metrics(
    preds: *const f64,
    truths: *const f64,
    n: usize,
    out: *mut FrRegression,
) -> FrStatus {
    guard(|| {
        let p = slice_arg(preds, n, "preds")?;
        let t = slice_arg(truths, n, "truths")?;
        let r = evaluate::regression_metrics(p, t).map_err(lib_err)?;
        *out_arg(out, "out")? = FrRegression {
            mae: r.mae,
            rmse: r.rmse,
            medae: r.medae,
            n: r.n,
        };
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a handle for [`fr_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_model_load(path: *const c_char, out: *mut *mut FrModel) -> FrStatus {
    guard(|| {
        let p = path_arg(path)?;
        let slot = out_arg(out, "out")?;
        let inner = checkpoint::load(&p).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(FrModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`fr_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fr_model_free(model: *mut FrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn to_ffi(p: &Prediction) -> FrPrediction {
    FrPrediction {
        year: p.year,
        structure: p.structure.index() as u32,
        ptype: p.ptype.index() as u32,
        fireproof: p.fireproof.index() as u32,
        structure_probs: p.structure_probs,
        ptype_probs: p.ptype_probs,
    }
}

unsafe fn model_arg<'a>(m: *const FrModel) -> Result<&'a MultiTaskModel, FrStatus> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(FrStatus::NullPointer, "model is null"))
}

/// Predicts from an image file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fr_model_predict_file(
    model: *const FrModel,
    path: *const c_char,
    out: *mut FrPrediction,
) -> FrStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = path_arg(path)?;
        let slot = out_arg(out, "out")?;
        *slot = to_ffi(&m.predict_file(&p).map_err(lib_err)?);
        Ok(())
    })
}

/// Predicts from packed 8-bit RGB rows (`width * height * 3` bytes, no padding).
///
/// # Safety
/// `model` must be a live handle; `rgb` must point to `width * height * 3`
/// readable bytes; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fr_model_predict_rgb(
    model: *const FrModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut FrPrediction,
) -> FrStatus {
    guard(|| {
        let m = model_arg(model)?;
        if width == 0 || height == 0 {
            return Err(fail(FrStatus::InvalidArgument, "image has zero size"));
        }
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| fail(FrStatus::InvalidArgument, "image too large"))?;
        let data = slice_arg(rgb, len, "rgb")?.to_vec();
        let img = image::RgbImage::from_raw(width, height, data)
            .ok_or_else(|| fail(FrStatus::ShapeMismatch, "buffer does not match dimensions"))?;
        let slot = out_arg(out, "out")?;
        *slot = to_ffi(&m.predict(&img).map_err(lib_err)?);
        Ok(())
    })
}

/// Number of scalar parameters in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fr_model_param_count(model: *const FrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}
