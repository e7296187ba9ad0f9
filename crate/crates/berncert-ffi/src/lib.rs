//! C ABI for the certification toolkit.
//!
//! Handles are opaque pointers owned by the caller and released through
//! the matching `_free` function. Every fallible entry point returns a
//! [`BcStatus`]; on failure a message is stored in thread-local storage
//! and can be read with [`bc_last_error`] until the next failing call on
//! the same thread. Passing a handle to any function after freeing it is
//! undefined behavior, as with any C library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use berncert::bernstein::BernsteinSmoother;
use berncert::certify;
use berncert::model::MlpModel;
use berncert::solvers::SolverConfig;
use berncert::Error;

/// Status code of a C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally valid but semantically rejected.
    InvalidArgument = 2,
    /// A filesystem read or write failed.
    IoFailure = 3,
    /// A method constraint was violated (for example d > K).
    ConstraintViolation = 4,
}

/// Opaque classifier handle.
pub struct BcModel {
    inner: MlpModel,
}

/// Opaque smoother handle.
pub struct BcSmoother {
    inner: BernsteinSmoother,
}

/// One certification outcome.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BcCertificate {
    /// Argmax of the smoothed logits at the feature anchor.
    pub prediction: usize,
    /// Certified feature-space radius.
    pub radius: f64,
    /// Final boundary residual, one half of the squared norm.
    pub residual_norm_sq: f64,
    /// Frozen boundary offset.
    pub xi: f64,
    /// Whether the solver met a tolerance; a certificate with this unset
    /// is an upper bound of unverified quality.
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(e: &Error) -> BcStatus {
    set_error(&e.to_string());
    match e {
        Error::Io { .. } | Error::Csv(_) => BcStatus::IoFailure,
        Error::Constraint(_) => BcStatus::ConstraintViolation,
        _ => BcStatus::InvalidArgument,
    }
}

fn fail_null(what: &str) -> BcStatus {
    set_error(&format!("{what} must not be null"));
    BcStatus::NullArgument
}

unsafe fn utf8_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BcStatus> {
    if p.is_null() {
        return Err(fail_null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        BcStatus::InvalidArgument
    })
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize) -> Result<&'a [f64], BcStatus> {
    if p.is_null() {
        return Err(fail_null("input vector"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn bc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; never free it.
#[no_mangle]
pub extern "C" fn bc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parses a model from a JSON string into a new handle.
///
/// # Safety
/// `json` must be NUL-terminated and `out` writable; null pointers are
/// reported as a status, not dereferenced.
#[no_mangle]
pub unsafe extern "C" fn bc_model_from_json(
    json: *const c_char,
    out: *mut *mut BcModel,
) -> BcStatus {
    if out.is_null() {
        return fail_null("output handle");
    }
    let json = match utf8_arg(json, "model JSON") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match MlpModel::from_json(json) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BcModel { inner }));
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Loads a model from a JSON file into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable; null pointers are
/// reported as a status, not dereferenced.
#[no_mangle]
pub unsafe extern "C" fn bc_model_load_json(
    path: *const c_char,
    out: *mut *mut BcModel,
) -> BcStatus {
    if out.is_null() {
        return fail_null("output handle");
    }
    let path = match utf8_arg(path, "model path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match MlpModel::load_json(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BcModel { inner }));
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Serializes a model to JSON. The returned string must be released with
/// [`bc_string_free`].
///
/// # Safety
/// `model` must be a live handle from this library and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_model_to_json(
    model: *const BcModel,
    out: *mut *mut c_char,
) -> BcStatus {
    if model.is_null() {
        return fail_null("model handle");
    }
    if out.is_null() {
        return fail_null("output string");
    }
    match (*model).inner.to_json() {
        Ok(json) => match CString::new(json) {
            Ok(s) => {
                *out = s.into_raw();
                BcStatus::Ok
            }
            Err(_) => {
                set_error("serialized JSON contained an interior NUL");
                BcStatus::InvalidArgument
            }
        },
        Err(e) => fail(&e),
    }
}

/// Releases a model handle; null is a no-op.
///
/// # Safety
/// `model` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn bc_model_free(model: *mut BcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the model input; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn bc_model_input_dim(model: *const BcModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.input_dim()
    }
}

/// Dimension of the smoothing head's input; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn bc_model_feature_dim(model: *const BcModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.feature_dim()
    }
}

/// Number of classes; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from this library, or null.
#[no_mangle]
pub unsafe extern "C" fn bc_model_num_classes(model: *const BcModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.num_classes()
    }
}

/// Argmax of the base model's logits at `x` (length `len`).
///
/// # Safety
/// `model` must be a live handle, `x` must point to `len` readable
/// doubles, and `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_predict(
    model: *const BcModel,
    x: *const f64,
    len: usize,
    out_class: *mut usize,
) -> BcStatus {
    if model.is_null() {
        return fail_null("model handle");
    }
    if out_class.is_null() {
        return fail_null("output class");
    }
    let x = match slice_arg(x, len) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match (*model).inner.predict(x) {
        Ok(class) => {
            *out_class = class;
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Builds the degree-`n` Bernstein smoother of the model's head.
///
/// # Safety
/// `model` must be a live handle from this library and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_smoother_build(
    model: *const BcModel,
    n: usize,
    out: *mut *mut BcSmoother,
) -> BcStatus {
    if model.is_null() {
        return fail_null("model handle");
    }
    if out.is_null() {
        return fail_null("output handle");
    }
    match certify::build_head_smoother(&(*model).inner, n) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BcSmoother { inner }));
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Writes a smoother to a JSON file.
///
/// # Safety
/// `smoother` must be a live handle from this library and `path`
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bc_smoother_save_json(
    smoother: *const BcSmoother,
    path: *const c_char,
) -> BcStatus {
    if smoother.is_null() {
        return fail_null("smoother handle");
    }
    let path = match utf8_arg(path, "smoother path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match (*smoother).inner.save_json(Path::new(path)) {
        Ok(()) => BcStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Loads a smoother from a JSON file into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable; null pointers are
/// reported as a status, not dereferenced.
#[no_mangle]
pub unsafe extern "C" fn bc_smoother_load_json(
    path: *const c_char,
    out: *mut *mut BcSmoother,
) -> BcStatus {
    if out.is_null() {
        return fail_null("output handle");
    }
    let path = match utf8_arg(path, "smoother path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match BernsteinSmoother::load_json(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BcSmoother { inner }));
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Releases a smoother handle; null is a no-op.
///
/// # Safety
/// `smoother` must come from this library and not have been freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn bc_smoother_free(smoother: *mut BcSmoother) {
    if !smoother.is_null() {
        drop(Box::from_raw(smoother));
    }
}

/// Argmax of the smoothed logits at the feature anchor of input `x`.
///
/// # Safety
/// `model` and `smoother` must be live handles, `x` must point to `len`
/// readable doubles, and `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_predict_smoothed(
    model: *const BcModel,
    smoother: *const BcSmoother,
    x: *const f64,
    len: usize,
    out_class: *mut usize,
) -> BcStatus {
    if model.is_null() {
        return fail_null("model handle");
    }
    if smoother.is_null() {
        return fail_null("smoother handle");
    }
    if out_class.is_null() {
        return fail_null("output class");
    }
    let x = match slice_arg(x, len) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match certify::predict_smoothed(x, &(*model).inner, &(*smoother).inner) {
        Ok(class) => {
            *out_class = class;
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Certifies one input under the p-norm with boundary sharpness `c`
/// (pass INFINITY for the exact boundary), using the default solver.
///
/// # Safety
/// `model` and `smoother` must be live handles, `x` must point to `len`
/// readable doubles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_certify(
    model: *const BcModel,
    smoother: *const BcSmoother,
    x: *const f64,
    len: usize,
    p: f64,
    c: f64,
    out: *mut BcCertificate,
) -> BcStatus {
    if model.is_null() {
        return fail_null("model handle");
    }
    if smoother.is_null() {
        return fail_null("smoother handle");
    }
    if out.is_null() {
        return fail_null("output certificate");
    }
    let x = match slice_arg(x, len) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg = SolverConfig::default();
    match certify::certify(x, None, &(*model).inner, &(*smoother).inner, p, c, &cfg) {
        Ok(res) => {
            *out = BcCertificate {
                prediction: res.prediction,
                radius: res.radius,
                residual_norm_sq: res.residual_norm_sq,
                xi: res.xi,
                converged: res.converged,
            };
            BcStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Releases a string returned by this library; null is a no-op.
///
/// # Safety
/// `s` must come from [`bc_model_to_json`] and not have been freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn bc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// Read-only handles may be shared across caller threads.
fn _assert_send_sync() {
    fn check<T: Send + Sync>() {}
    check::<MlpModel>();
    check::<BernsteinSmoother>();
}
