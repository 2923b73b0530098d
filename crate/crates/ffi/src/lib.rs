//! C ABI over the `coshape` library.
//!
//! Scenarios are opaque handles built from JSON. Every fallible call returns a
//! [`CsStatus`]; on failure a message is available from
//! [`cs_last_error_message`] until the next call on the same thread. TX indices
//! are 0-based. Strings returned by the library must be released with
//! [`cs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use coshape::allocation::{self, allocate_exhaustive};
use coshape::shaping::{optimize_shaping, unshaped_model, SolverOptions};
use coshape::simulate::{self, ExperimentConfig, SweepBlock};
use coshape::{fusion, CovMatrix, Error, Scenario, ScenarioDoc};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad input: malformed JSON, out-of-range index, undersized buffer.
    Config = 3,
    /// Singular or ill-conditioned numerics.
    Numerical = 4,
    Panic = 5,
}

/// Opaque scenario handle.
pub struct CsScenario {
    inner: Scenario,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CsStatus, msg: impl Into<String>) -> CsStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> CsStatus {
    let status = if e.is_config() { CsStatus::Config } else { CsStatus::Numerical };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> CsStatus) -> CsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CsStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, CsStatus> {
    if p.is_null() {
        return Err(fail(CsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(CsStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn scenario<'a>(p: *const CsScenario) -> Result<&'a Scenario, CsStatus> {
    p.as_ref().map(|s| &s.inner).ok_or_else(|| fail(CsStatus::NullPointer, "null scenario handle"))
}

fn check_tx(s: &Scenario, tx: usize) -> Result<(), CsStatus> {
    if tx < s.k() {
        Ok(())
    } else {
        Err(fail(CsStatus::Config, format!("TX index {tx} out of range (K = {})", s.k())))
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! lib {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return from_error(e),
        }
    };
}

/// Parses a scenario document and stores a new handle in `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_scenario_from_json(json: *const c_char, out: *mut *mut CsScenario) -> CsStatus {
    guard(|| {
        if out.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        let text = tri!(read_str(json));
        let doc = lib!(ScenarioDoc::from_json(text));
        let s = lib!(doc.to_scenario());
        *out = Box::into_raw(Box::new(CsScenario { inner: s }));
        CsStatus::Ok
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `s` must come from [`cs_scenario_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_scenario_free(s: *mut CsScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Channel dimension `n = K·L·M·N`, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_scenario_dim(s: *const CsScenario) -> usize {
    s.as_ref().map_or(0, |s| s.inner.n())
}

/// Number of directed cooperation links, in the order used by
/// [`cs_allocate_exhaustive`].
///
/// # Safety
/// `s` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_num_links(s: *const CsScenario) -> usize {
    s.as_ref().map_or(0, |s| allocation::links(&s.inner).len())
}

/// Closed-form MSE at TX `tx` with `B = I` on every incoming link at `rate` bits.
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_unshaped_mse(s: *const CsScenario, tx: usize, rate: u32, out: *mut f64) -> CsStatus {
    guard(|| {
        let s = tri!(scenario(s));
        tri!(check_tx(s, tx));
        if out.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        let rates = vec![rate; s.coop(tx).len()];
        let qq: Vec<CovMatrix> = lib!(unshaped_model(s, tx, &rates)).into_iter().map(|h| h.q_q).collect();
        *out = lib!(fusion::closed_form_mse(s, tx, &qq));
        CsStatus::Ok
    })
}

/// MSE at TX `tx` with optimized shaping on every incoming link at `rate` bits.
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_shaped_mse(s: *const CsScenario, tx: usize, rate: u32, out: *mut f64) -> CsStatus {
    guard(|| {
        let s = tri!(scenario(s));
        tri!(check_tx(s, tx));
        if out.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        let rates = vec![rate; s.coop(tx).len()];
        *out = lib!(optimize_shaping(s, tx, &rates, &SolverOptions::default())).objective_exact;
        CsStatus::Ok
    })
}

/// Centralized MSE at TX `tx` from its own and its cooperators' unquantized estimates.
///
/// # Safety
/// `s` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_wyner_ziv_bound(s: *const CsScenario, tx: usize, out: *mut f64) -> CsStatus {
    guard(|| {
        let s = tri!(scenario(s));
        tri!(check_tx(s, tx));
        if out.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        *out = lib!(simulate::wz_bound_for(s, tx));
        CsStatus::Ok
    })
}

/// Best split of `budget` bits over all links. Writes [`cs_num_links`] rates
/// into `link_rates` (capacity `len`) and the average MSE into `avg_mse`.
///
/// # Safety
/// `s` must be a live handle, `link_rates` valid for `len` writes and
/// `avg_mse` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_allocate_exhaustive(
    s: *const CsScenario,
    budget: u32,
    link_rates: *mut u32,
    len: usize,
    avg_mse: *mut f64,
) -> CsStatus {
    guard(|| {
        let s = tri!(scenario(s));
        if link_rates.is_null() || avg_mse.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        let links = allocation::links(s).len();
        if len < links {
            return fail(CsStatus::Config, format!("rate buffer holds {len} entries, need {links}"));
        }
        let res = lib!(allocate_exhaustive(s, budget, &SolverOptions::default()));
        std::slice::from_raw_parts_mut(link_rates, links).copy_from_slice(&res.best.link_rates);
        *avg_mse = res.best.avg_mse;
        CsStatus::Ok
    })
}

/// Runs a Monte Carlo MSE sweep and stores the CSV table in `*csv_out`.
/// `sweep_json` is a sweep block (1-based TX ids) or null for defaults.
///
/// # Safety
/// `s` must be a live handle, `sweep_json` null or NUL-terminated, and
/// `csv_out` a valid pointer. Free the result with [`cs_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cs_run_mse_sweep(
    s: *const CsScenario,
    sweep_json: *const c_char,
    csv_out: *mut *mut c_char,
) -> CsStatus {
    guard(|| {
        let s = tri!(scenario(s));
        if csv_out.is_null() {
            return fail(CsStatus::NullPointer, "null output pointer");
        }
        let sweep: SweepBlock = if sweep_json.is_null() {
            SweepBlock::default()
        } else {
            let text = tri!(read_str(sweep_json));
            match serde_json::from_str(text) {
                Ok(b) => b,
                Err(e) => return fail(CsStatus::Config, format!("invalid sweep block: {e}")),
            }
        };
        let doc = ExperimentConfig {
            scenario: ScenarioDoc::from_scenario(s),
            sweep,
            solver: SolverOptions::default(),
            lloyd: None,
        };
        let cfg = lib!(doc.sweep_config());
        let csv = lib!(simulate::run_mse_sweep(s, &cfg)).to_csv();
        *csv_out = CString::new(csv).expect("CSV has no NUL bytes").into_raw();
        CsStatus::Ok
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `p` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_string_free(p: *mut c_char) {
    if !p.is_null() {
        drop(CString::from_raw(p));
    }
}

/// Message for the last failed call on this thread, or null.
#[no_mangle]
pub extern "C" fn cs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| CString::new(coshape::VERSION).expect("no NUL")).as_ptr()
}
