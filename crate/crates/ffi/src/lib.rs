//! C ABI over the `psar` estimators.
//!
//! Handles are opaque and owned by the caller; free them with the matching
//! `*_free`. Every fallible call returns a [`PsarStatus`]. On failure the
//! message is kept per thread and read with [`psar_last_error`]. Panics
//! never cross the boundary: they are caught and reported as
//! `PSAR_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use faer::Mat;
use psar::cle::FitOptions;
use psar::inference::{bootstrap_se, fit_estimator, BootstrapMode};
use psar::network::row_normalize;
use psar::{Adjacency, EstimatorKind, FitResult, NoiseLaw, ObservedData, PrivacyConfig, PsarError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsarStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad dimensions, ids, variances or options.
    InvalidArgument = 2,
    /// A node has no out-edges, so its weight row is undefined.
    ZeroOutDegree = 3,
    /// Singular or indefinite system during estimation.
    Numerical = 4,
    NotConverged = 5,
    /// Caught panic or other unexpected failure.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsarEstimator {
    Qmle = 0,
    Cle = 1,
    Cls = 2,
}

// Taken as a plain integer at the boundary: an out-of-range C enum value
// would be undefined behaviour if read as `PsarEstimator`.
fn estimator_kind(code: u32) -> Option<EstimatorKind> {
    match code {
        c if c == PsarEstimator::Qmle as u32 => Some(EstimatorKind::Qmle),
        c if c == PsarEstimator::Cle as u32 => Some(EstimatorKind::Cle),
        c if c == PsarEstimator::Cls as u32 => Some(EstimatorKind::Cls),
        _ => None,
    }
}

/// Observed data set: noisy response, noisy covariates and the network.
pub struct PsarData {
    inner: ObservedData,
}

/// A fitted model.
pub struct PsarFit {
    inner: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &PsarError) -> PsarStatus {
    match e {
        PsarError::ZeroOutDegree(_) => PsarStatus::ZeroOutDegree,
        PsarError::SingularSystem(_)
        | PsarError::NotPositiveDefinite(_)
        | PsarError::RankDeficientX
        | PsarError::NoInteriorMax(_)
        | PsarError::SingularCorrectedHessian
        | PsarError::NonPositiveSigma2(_)
        | PsarError::TooFewConverged { .. } => PsarStatus::Numerical,
        PsarError::MaxIterExceeded(_) => PsarStatus::NotConverged,
        e if e.is_config() => PsarStatus::InvalidArgument,
        _ => PsarStatus::Internal,
    }
}

fn fail(status: PsarStatus, msg: impl Into<String>) -> PsarStatus {
    set_error(msg.into());
    status
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (PsarStatus, String)>) -> PsarStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsarStatus::Ok,
        Ok(Err((s, msg))) => fail(s, msg),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(PsarStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn lib_err(e: PsarError) -> (PsarStatus, String) {
    (status_of(&e), e.to_string())
}

fn bad(msg: impl Into<String>) -> (PsarStatus, String) {
    (PsarStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> (PsarStatus, String) {
    (PsarStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (PsarStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next `psar_*` call on the same thread.
#[no_mangle]
pub extern "C" fn psar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a data set.
///
/// - `y`: `n` noisy responses.
/// - `x`: `n * p` noisy covariates, row-major. The last `p2` columns carry
///   privacy noise of variance `lambda2_x`.
/// - `src`, `dst`: `n_edges` directed edges as 0-based row indices. Every
///   node needs at least one out-edge.
/// - `noise_law`: 0 normal, 1 scaled t(6). Only the bootstrap uses it.
///
/// On success `*out` owns a new handle.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psar_data_new(
    n: usize,
    p: usize,
    y: *const f64,
    x: *const f64,
    n_edges: usize,
    src: *const usize,
    dst: *const usize,
    lambda2: f64,
    lambda2_x: f64,
    p2: usize,
    noise_law: u32,
    out: *mut *mut PsarData,
) -> PsarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if n == 0 || p == 0 {
            return Err(bad("need n >= 1 and p >= 1"));
        }
        if p2 > p {
            return Err(bad(format!("p2 = {p2} exceeds p = {p}")));
        }
        let len = n.checked_mul(p).ok_or_else(|| bad("n * p overflows"))?;
        let y = slice(y, n, "y")?;
        let x = slice(x, len, "x")?;
        let src = slice(src, n_edges, "src")?;
        let dst = slice(dst, n_edges, "dst")?;
        let law = match noise_law {
            0 => NoiseLaw::Normal,
            1 => NoiseLaw::ScaledT6,
            k => return Err(bad(format!("unknown noise law {k}"))),
        };
        let adj = Adjacency::from_edges(n, src.iter().copied().zip(dst.iter().copied())).map_err(lib_err)?;
        let w = row_normalize(&adj).map_err(lib_err)?;
        let xm = Mat::from_fn(n, p, |i, j| x[i * p + j]);
        let privacy = PrivacyConfig { lambda2, lambda2_x, p1: p - p2, p2, noise_law: law };
        let d = ObservedData::new(y.to_vec(), xm, Arc::new(w), privacy).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PsarData { inner: d }));
        Ok(())
    })
}

/// Free a data handle. Null is ignored.
///
/// # Safety
/// `data` must come from [`psar_data_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psar_data_free(data: *mut PsarData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fit `estimator` (a `PsarEstimator` value) to `data`. With `bootstrap_b >= 2`, standard errors
/// come from a one-step parametric bootstrap seeded by `seed`; 0 skips
/// them. A fit that stops at the iteration cap returns
/// `PSAR_STATUS_NOT_CONVERGED` and no handle.
///
/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn psar_fit(
    data: *const PsarData,
    estimator: u32,
    bootstrap_b: usize,
    seed: u64,
    out: *mut *mut PsarFit,
) -> PsarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let d = &data.as_ref().ok_or_else(|| null("data"))?.inner;
        if bootstrap_b == 1 {
            return Err(bad("bootstrap_b must be 0 or at least 2"));
        }
        let kind = estimator_kind(estimator).ok_or_else(|| bad(format!("unknown estimator {estimator}")))?;
        let opts = FitOptions::default();
        let mut fit = fit_estimator(kind, d, None, &opts).map_err(lib_err)?;
        if !fit.converged {
            return Err((PsarStatus::NotConverged, format!("no convergence after {} iterations", fit.iterations)));
        }
        if bootstrap_b >= 2 {
            let bs = bootstrap_se(d, &fit, bootstrap_b, seed, BootstrapMode::OneStep, &opts).map_err(lib_err)?;
            fit = fit.with_se(bs.se, 0.95);
        }
        *out = Box::into_raw(Box::new(PsarFit { inner: fit }));
        Ok(())
    })
}

/// Free a fit handle. Null is ignored.
///
/// # Safety
/// `fit` must come from [`psar_fit`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_free(fit: *mut PsarFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Length of the parameter vector `(rho, beta_1..beta_p, sigma2)`, or 0
/// for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_n_params(fit: *const PsarFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.point.p() + 2)
}

/// Iterations used by the fit, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_iterations(fit: *const PsarFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.iterations)
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), (PsarStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len < src.len() {
        return Err(bad(format!("buffer holds {len} values, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Copy the estimates `(rho, beta..., sigma2)` into `out[0..len]`.
///
/// # Safety
/// `fit` must be a live handle and `out` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_params(fit: *const PsarFit, out: *mut f64, len: usize) -> PsarStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        copy_out(&f.point.to_vec(), out, len)
    })
}

/// Copy the bootstrap standard errors. Fails with
/// `PSAR_STATUS_INVALID_ARGUMENT` if the fit was made without bootstrap.
///
/// # Safety
/// `fit` must be a live handle and `out` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_se(fit: *const PsarFit, out: *mut f64, len: usize) -> PsarStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        let se = f.se.as_ref().ok_or_else(|| bad("fit has no standard errors; pass bootstrap_b >= 2"))?;
        copy_out(se, out, len)
    })
}

/// Full fit as a JSON string, or null on failure. Release it with
/// [`psar_string_free`].
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psar_fit_to_json(fit: *const PsarFit) -> *mut c_char {
    let mut s = ptr::null_mut();
    let status = guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        let json = serde_json::to_string(f).map_err(|e| (PsarStatus::Internal, e.to_string()))?;
        s = CString::new(json).map_err(|e| (PsarStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    });
    if status == PsarStatus::Ok {
        s
    } else {
        ptr::null_mut()
    }
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from [`psar_fit_to_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psar_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Borrow the last error as a Rust string (testing convenience).
pub fn last_error_string() -> Option<String> {
    let p = psar_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}
