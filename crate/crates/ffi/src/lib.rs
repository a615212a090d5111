//! C ABI for the tariff engine: opaque handles, integer status codes, and a
//! thread-local last-error message. Scenario files go in, tariffs, costs and
//! CSV tables come out, so other languages can bind without touching the
//! solver internals.
//!
//! Ownership rules: every `*_new`/`*_load`/`*_run` hands back a handle the
//! caller must release with the matching `*_free`. Output pointers are
//! written only on `HT_STATUS_OK`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hubtrade::io::{builtin, export_results, load_scenario, Scenario};
use hubtrade::runner::{run, RunError, RunOutputs, RunOverrides};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HtStatus {
    Ok = 0,
    /// A subproblem or the market clearing is infeasible, or a numerical
    /// failure stopped the run.
    Infeasible = 1,
    /// The scenario file or the configuration is invalid.
    Config = 2,
    /// Filesystem failure.
    Io = 3,
    /// A null pointer was passed where a value is required.
    NullArgument = 4,
    /// An internal panic was caught at the boundary.
    Internal = 5,
}

/// Opaque scenario handle.
pub struct HtScenario {
    inner: Scenario,
}

/// Opaque result handle for one finished run.
pub struct HtResult {
    inner: RunOutputs,
    num_hubs: usize,
}

/// Tunable subset of the run configuration. Zero/negative values keep the
/// scenario's own setting; `constant_gamma` below zero enables the full
/// tariff-design loop.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HtRunOptions {
    pub days: i64,
    pub t_f: i64,
    pub eps: f64,
    pub sigma: f64,
    pub gamma0: f64,
    pub alpha0: f64,
    pub constant_gamma: f64,
    pub oracle: bool,
}

impl HtRunOptions {
    fn to_overrides(self) -> RunOverrides {
        RunOverrides {
            days: (self.days > 0).then_some(self.days as usize),
            t_f: (self.t_f > 0).then_some(self.t_f as usize),
            eps: (self.eps > 0.0).then_some(self.eps),
            sigma: (self.sigma > 0.0).then_some(self.sigma),
            gamma0: (self.gamma0 >= 0.0).then_some(self.gamma0),
            alpha0: (self.alpha0 > 0.0).then_some(self.alpha0),
            constant_gamma: (self.constant_gamma >= 0.0).then_some(self.constant_gamma),
            oracle: self.oracle,
        }
    }
}

fn run_error_status(e: &RunError) -> HtStatus {
    match e.exit_code() {
        2 => HtStatus::Config,
        _ => HtStatus::Infeasible,
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

fn guarded<F: FnOnce() -> HtStatus>(f: F) -> HtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&msg);
            HtStatus::Internal
        }
    }
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn ht_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Default run options: every field defers to the scenario file and the
/// tariff-design loop is enabled.
#[no_mangle]
pub extern "C" fn ht_run_options_default() -> HtRunOptions {
    HtRunOptions {
        days: 0,
        t_f: 0,
        eps: 0.0,
        sigma: 0.0,
        gamma0: -1.0,
        alpha0: 0.0,
        constant_gamma: -1.0,
        oracle: false,
    }
}

/// Loads and validates a scenario file.
#[no_mangle]
pub unsafe extern "C" fn ht_scenario_load(
    path: *const c_char,
    out: *mut *mut HtScenario,
) -> HtStatus {
    guarded(|| {
        let (Some(path), false) = (cstr_arg(path), out.is_null()) else {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        };
        match load_scenario(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(HtScenario { inner }));
                HtStatus::Ok
            }
            Err(e) => {
                set_last_error(&e.to_string());
                HtStatus::Config
            }
        }
    })
}

/// Builds a bundled scenario pack: 0 = the 33-bus five-hub pack, 1 = the
/// two-bus toy.
#[no_mangle]
pub unsafe extern "C" fn ht_scenario_builtin(
    pack: u32,
    days: usize,
    out: *mut *mut HtScenario,
) -> HtStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        let inner = match pack {
            0 => builtin::ieee33_5hub(days.max(1)),
            1 => builtin::two_bus_toy(24 * days.max(1)),
            _ => {
                set_last_error("unknown builtin pack");
                return HtStatus::Config;
            }
        };
        *out = Box::into_raw(Box::new(HtScenario { inner }));
        HtStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_scenario_free(scenario: *mut HtScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ht_scenario_num_hubs(scenario: *const HtScenario) -> usize {
    if scenario.is_null() {
        return 0;
    }
    (*scenario).inner.hubs.len()
}

/// Runs the rolling-horizon pipeline on a scenario.
#[no_mangle]
pub unsafe extern "C" fn ht_run(
    scenario: *const HtScenario,
    options: *const HtRunOptions,
    out: *mut *mut HtResult,
) -> HtStatus {
    guarded(|| {
        if scenario.is_null() || out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        let overrides = if options.is_null() {
            RunOverrides::default()
        } else {
            (*options).to_overrides()
        };
        let sc = &(*scenario).inner;
        match run(sc, &overrides) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(HtResult {
                    inner,
                    num_hubs: sc.hubs.len(),
                }));
                HtStatus::Ok
            }
            Err(e) => {
                set_last_error(&e.to_string());
                run_error_status(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_result_free(result: *mut HtResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ht_result_num_windows(result: *const HtResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).inner.windows.len()
}

/// Designed tariff between two hubs in a window [CHF/kWh].
#[no_mangle]
pub unsafe extern "C" fn ht_result_gamma(
    result: *const HtResult,
    window: usize,
    hub_i: usize,
    hub_j: usize,
    out: *mut f64,
) -> HtStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        let r = &*result;
        let Some(w) = r.inner.windows.get(window) else {
            set_last_error("window out of range");
            return HtStatus::Config;
        };
        if hub_i == hub_j || hub_i >= r.num_hubs || hub_j >= r.num_hubs {
            set_last_error("hub pair out of range");
            return HtStatus::Config;
        }
        *out = w.gamma.get(hub_i, hub_j);
        HtStatus::Ok
    })
}

/// Dispatch-level system cost of one window [CHF].
#[no_mangle]
pub unsafe extern "C" fn ht_result_system_cost(
    result: *const HtResult,
    window: usize,
    out: *mut f64,
) -> HtStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        match (&(*result).inner.windows).get(window) {
            Some(w) => {
                *out = w.system_cost;
                HtStatus::Ok
            }
            None => {
                set_last_error("window out of range");
                HtStatus::Config
            }
        }
    })
}

/// Summed absolute traded energy of one window [kWh].
#[no_mangle]
pub unsafe extern "C" fn ht_result_total_trades(
    result: *const HtResult,
    window: usize,
    out: *mut f64,
) -> HtStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        match (&(*result).inner.windows).get(window) {
            Some(w) => {
                *out = w.total_trades_kwh;
                HtStatus::Ok
            }
            None => {
                set_last_error("window out of range");
                HtStatus::Config
            }
        }
    })
}

/// Normalized cost reduction of one hub at the final settlement.
#[no_mangle]
pub unsafe extern "C" fn ht_result_reduction(
    result: *const HtResult,
    hub: usize,
    out: *mut f64,
) -> HtStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        }
        let r = &*result;
        let Some(settlement) = r.inner.settlements.last() else {
            set_last_error("run has no settlement");
            return HtStatus::Config;
        };
        match settlement.report.d.get(hub) {
            Some(&d) => {
                *out = d;
                HtStatus::Ok
            }
            None => {
                set_last_error("hub out of range");
                HtStatus::Config
            }
        }
    })
}

/// Writes every result table of the run into `dir` as CSV.
#[no_mangle]
pub unsafe extern "C" fn ht_result_export_csv(
    result: *const HtResult,
    dir: *const c_char,
) -> HtStatus {
    guarded(|| {
        let (false, Some(dir)) = (result.is_null(), cstr_arg(dir)) else {
            set_last_error("null argument");
            return HtStatus::NullArgument;
        };
        match export_results(&(*result).inner, Path::new(dir)) {
            Ok(()) => HtStatus::Ok,
            Err(e) => {
                set_last_error(&e.to_string());
                HtStatus::Io
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_the_c_surface() {
        unsafe {
            let mut scenario: *mut HtScenario = ptr::null_mut();
            let status = ht_scenario_builtin(1, 1, &mut scenario);
            assert_eq!(status, HtStatus::Ok);
            assert_eq!(ht_scenario_num_hubs(scenario), 2);

            let mut opts = ht_run_options_default();
            opts.days = 1;
            opts.constant_gamma = 0.005;
            let mut result: *mut HtResult = ptr::null_mut();
            let status = ht_run(scenario, &opts, &mut result);
            assert_eq!(status, HtStatus::Ok);
            assert_eq!(ht_result_num_windows(result), 1);

            let mut gamma = f64::NAN;
            assert_eq!(ht_result_gamma(result, 0, 0, 1, &mut gamma), HtStatus::Ok);
            assert!((gamma - 0.005).abs() < 1e-12);
            let mut cost = f64::NAN;
            assert_eq!(ht_result_system_cost(result, 0, &mut cost), HtStatus::Ok);
            assert!(cost.is_finite());
            let mut d = f64::NAN;
            assert_eq!(ht_result_reduction(result, 0, &mut d), HtStatus::Ok);
            assert!(d.is_finite());

            let dir = std::env::temp_dir().join("hubtrade-ffi-test");
            let cdir = CString::new(dir.to_str().unwrap()).unwrap();
            assert_eq!(ht_result_export_csv(result, cdir.as_ptr()), HtStatus::Ok);
            assert!(dir.join("tariffs.csv").exists());

            ht_result_free(result);
            ht_scenario_free(scenario);
        }
    }

    #[test]
    fn errors_surface_through_status_and_message() {
        unsafe {
            let mut scenario: *mut HtScenario = ptr::null_mut();
            let path = CString::new("/nonexistent/scenario.json").unwrap();
            let status = ht_scenario_load(path.as_ptr(), &mut scenario);
            assert_eq!(status, HtStatus::Config);
            let mut buf = [0 as c_char; 256];
            let n = ht_last_error_message(buf.as_mut_ptr(), buf.len());
            assert!(n > 0);

            let status = ht_run(ptr::null(), ptr::null(), ptr::null_mut());
            assert_eq!(status, HtStatus::NullArgument);
        }
    }
}
