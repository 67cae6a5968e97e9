//! C ABI over `smore-core`.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every fallible call returns a [`SmoreStatus`] and
//! records a message readable through [`smore_last_error`] on the same
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use smore_core::costmodel::param_count;
use smore_core::experts::ExpertBank;
use smore_core::flexibility::{gamma_momor_bound, gamma_smore, gamma_smore_shared, gamma_smore_star};
use smore_core::numerics::RngState;
use smore_core::propagate::forward_routed;
use smore_core::router::Mode;
use smore_core::{ArchitectureSpec, Error, Variant};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoreStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    DimensionMismatch = 4,
    Unsupported = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoreGamma {
    Smore = 0,
    MomorBound = 1,
    Star = 2,
    Shared = 3,
}

/// Validated architecture description.
pub struct SmoreSpec(ArchitectureSpec);

/// Expert bank with its router.
pub struct SmoreBank(ExpertBank);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> SmoreStatus {
    match e {
        Error::InvalidSpec(_) | Error::FanoutExceedsPool { .. } | Error::Json(_) => SmoreStatus::InvalidConfig,
        Error::Dimension { .. } | Error::ParamLength { .. } => SmoreStatus::DimensionMismatch,
        Error::Unsupported(_) => SmoreStatus::Unsupported,
        _ => SmoreStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SmoreStatus, String)>) -> SmoreStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmoreStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SmoreStatus::Internal
        }
    }
}

fn lift<T>(r: smore_core::Result<T>) -> Result<T, (SmoreStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (SmoreStatus, String) {
    (SmoreStatus::NullPointer, "null pointer argument".into())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn smore_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses and validates a JSON architecture spec.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_spec_from_json(json: *const c_char, out: *mut *mut SmoreSpec) -> SmoreStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(null());
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| (SmoreStatus::InvalidUtf8, "spec is not UTF-8".to_string()))?;
        let spec = lift(ArchitectureSpec::from_json(text))?;
        *out = Box::into_raw(Box::new(SmoreSpec(spec)));
        Ok(())
    })
}

/// # Safety
/// `spec` must come from [`smore_spec_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn smore_spec_free(spec: *mut SmoreSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Input width `d` and output width `d_out`.
///
/// # Safety
/// `spec` must be a live handle; `d` and `d_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_spec_widths(spec: *const SmoreSpec, d: *mut usize, d_out: *mut usize) -> SmoreStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(null)?;
        if d.is_null() || d_out.is_null() {
            return Err(null());
        }
        *d = spec.0.d;
        *d_out = spec.0.d_out();
        Ok(())
    })
}

/// Adapter parameter count (experts, mixers and final projection).
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_spec_param_count(spec: *const SmoreSpec, out: *mut u64) -> SmoreStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = param_count(&spec.0).adapter();
        Ok(())
    })
}

/// Exact flexibility count as a decimal string; free it with
/// [`smore_string_free`].
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_spec_gamma(spec: *const SmoreSpec, which: SmoreGamma, out: *mut *mut c_char) -> SmoreStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let value = match which {
            SmoreGamma::Smore => gamma_smore(&spec.0),
            SmoreGamma::MomorBound => gamma_momor_bound(&spec.0),
            SmoreGamma::Star => gamma_smore_star(&spec.0),
            SmoreGamma::Shared => {
                let mut shared = spec.0.clone();
                shared.variant = Variant::SmoreShared;
                lift(gamma_smore_shared(&shared))?
            }
        };
        *out = CString::new(value.to_string()).expect("digits only").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn smore_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Seeded bank; up-projections start at zero so the adapter output is zero.
///
/// # Safety
/// `spec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_bank_init(spec: *const SmoreSpec, seed: u64, out: *mut *mut SmoreBank) -> SmoreStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let bank = lift(ExpertBank::init(&spec.0, &mut RngState::new(seed)))?;
        *out = Box::into_raw(Box::new(SmoreBank(bank)));
        Ok(())
    })
}

/// Replaces every parameter (router included) with U[-scale, scale] draws.
///
/// # Safety
/// `bank` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smore_bank_randomize(bank: *mut SmoreBank, seed: u64, scale: f64) -> SmoreStatus {
    guard(|| {
        let bank = bank.as_mut().ok_or_else(null)?;
        bank.0.randomize(&mut RngState::new(seed), scale);
        Ok(())
    })
}

/// # Safety
/// `bank` must come from [`smore_bank_init`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn smore_bank_free(bank: *mut SmoreBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of scalars in the bank, router included.
///
/// # Safety
/// `bank` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smore_bank_param_len(bank: *const SmoreBank, out: *mut usize) -> SmoreStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = bank.0.flat_len(true);
        Ok(())
    })
}

/// Routes and propagates one token in eval mode, writing the adapter output.
///
/// # Safety
/// `x` must hold `x_len` doubles and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn smore_bank_forward(
    bank: *const SmoreBank,
    x: *const f64,
    x_len: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> SmoreStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(null)?;
        if x.is_null() || out.is_null() {
            return Err(null());
        }
        let d_out = bank.0.spec().d_out();
        if out_len != d_out {
            return Err((SmoreStatus::DimensionMismatch, format!("output buffer holds {out_len}, need {d_out}")));
        }
        let x = std::slice::from_raw_parts(x, x_len);
        let (y, _) = lift(forward_routed(x, &bank.0, &mut RngState::new(seed), Mode::Eval))?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&y);
        Ok(())
    })
}
