//! C ABI over the delayline engine.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`DlStatus`]; the JSON description of the most recent failure on the
//! calling thread is available from [`dl_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use delayline::cascade::{reconstruct_series, series_from_states};
use delayline::cli::{execute, parse_config, parse_config_str, CliError, Command, Options, OperatorJson, Outcome, RunConfig};

/// Status codes. Values 3 to 7 coincide with the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    ResourceCap = 5,
    Computation = 6,
    Io = 7,
    OutOfRange = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlCommand {
    Evolve = 0,
    Correlate = 1,
    G2 = 2,
    Oracle = 3,
    Teleport = 4,
}

/// Commands arrive as plain integers so that out-of-range values from C
/// are rejected rather than transmuted.
fn command(code: i32) -> Result<Command, DlStatus> {
    Ok(match code {
        c if c == DlCommand::Evolve as i32 => Command::Evolve,
        c if c == DlCommand::Correlate as i32 => Command::Correlate,
        c if c == DlCommand::G2 as i32 => Command::G2,
        c if c == DlCommand::Oracle as i32 => Command::Oracle,
        c if c == DlCommand::Teleport as i32 => Command::Teleport,
        _ => return Err(simple_error(DlStatus::OutOfRange, "out_of_range", "unknown command code")),
    })
}

/// A parsed run configuration.
pub struct DlConfig {
    inner: RunConfig,
    tol: Option<f64>,
    max_intervals: Option<usize>,
}

/// Tables and diagnostics produced by one command.
pub struct DlResult {
    outcome: Outcome,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(status: DlStatus, json: String) -> DlStatus {
    let text = CString::new(json).unwrap_or_else(|_| CString::new("{\"error\":{}}").expect("no interior nul"));
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
    status
}

fn simple_error(status: DlStatus, kind: &str, message: &str) -> DlStatus {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message, "code": status as i32 } });
    set_error(status, v.to_string())
}

fn cli_error(e: CliError) -> DlStatus {
    let status = match e.exit_code() {
        3 => DlStatus::Parse,
        4 => DlStatus::Validation,
        5 => DlStatus::ResourceCap,
        7 => DlStatus::Io,
        _ => DlStatus::Computation,
    };
    set_error(status, e.to_json().to_string())
}

fn guard(f: impl FnOnce() -> DlStatus) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == DlStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => simple_error(DlStatus::Panic, "panic", "internal panic caught at the C boundary"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, DlStatus> {
    if p.is_null() {
        return Err(simple_error(DlStatus::NullPointer, "null_pointer", "string argument is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| simple_error(DlStatus::InvalidUtf8, "invalid_utf8", "string argument is not UTF-8"))
}

fn into_handle(cfg: RunConfig, out: *mut *mut DlConfig) -> DlStatus {
    let h = Box::new(DlConfig { inner: cfg, tol: None, max_intervals: None });
    unsafe { *out = Box::into_raw(h) };
    DlStatus::Ok
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// JSON description of the last failure on this thread, or null.
/// The returned string must be released with `dl_string_free`.
#[no_mangle]
pub extern "C" fn dl_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a configuration from JSON text.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_config_from_json(json: *const c_char, out: *mut *mut DlConfig) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "out is null");
        }
        *out = ptr::null_mut();
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_config_str(text) {
            Ok(cfg) => into_handle(cfg, out),
            Err(e) => cli_error(e),
        }
    })
}

/// Parse a configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_config_from_path(path: *const c_char, out: *mut *mut DlConfig) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match parse_config(Path::new(path)) {
            Ok(cfg) => into_handle(cfg, out),
            Err(e) => cli_error(e),
        }
    })
}

/// # Safety
/// `cfg` must be null or a handle from `dl_config_from_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dl_config_free(cfg: *mut DlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Override the tolerance; a non-positive value restores the config's own.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_config_set_tol(cfg: *mut DlConfig, tol: f64) -> DlStatus {
    match cfg.as_mut() {
        None => simple_error(DlStatus::NullPointer, "null_pointer", "cfg is null"),
        Some(c) => {
            c.tol = (tol > 0.0).then_some(tol);
            DlStatus::Ok
        }
    }
}

/// Override the interval cap; zero restores the default.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_config_set_max_intervals(cfg: *mut DlConfig, max_intervals: usize) -> DlStatus {
    match cfg.as_mut() {
        None => simple_error(DlStatus::NullPointer, "null_pointer", "cfg is null"),
        Some(c) => {
            c.max_intervals = (max_intervals > 0).then_some(max_intervals);
            DlStatus::Ok
        }
    }
}

/// Interval length xi as a fraction and the interval count for t_final.
///
/// # Safety
/// `cfg` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_config_plan(cfg: *const DlConfig, xi_num: *mut i64, xi_den: *mut i64, n: *mut usize) -> DlStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return simple_error(DlStatus::NullPointer, "null_pointer", "cfg is null");
        };
        if xi_num.is_null() || xi_den.is_null() || n.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "output pointer is null");
        }
        match c.inner.resolve(c.tol, c.max_intervals) {
            Ok(r) => {
                *xi_num = *r.plan.xi.numer();
                *xi_den = *r.plan.xi.denom();
                *n = r.plan.n;
                DlStatus::Ok
            }
            Err(e) => cli_error(e),
        }
    })
}

/// Expectation value of one observable on explicit times.
/// `observable` takes the config's operator names, e.g. "n:A".
///
/// # Safety
/// `cfg` must be a live handle; `times` and `values` must point to `len`
/// doubles each.
#[no_mangle]
pub unsafe extern "C" fn dl_evolve_observable(
    cfg: *const DlConfig,
    observable: *const c_char,
    times: *const f64,
    len: usize,
    values: *mut f64,
) -> DlStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return simple_error(DlStatus::NullPointer, "null_pointer", "cfg is null");
        };
        if len > 0 && (times.is_null() || values.is_null()) {
            return simple_error(DlStatus::NullPointer, "null_pointer", "times or values is null");
        }
        let name = match str_arg(observable) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let ts: &[f64] = if len == 0 { &[] } else { std::slice::from_raw_parts(times, len) };
        let run = || -> Result<Vec<f64>, CliError> {
            let r = c.inner.resolve(c.tol, c.max_intervals)?;
            if ts.iter().any(|t| t.is_nan() || *t < 0.0 || *t > c.inner.t_final) || ts.windows(2).any(|w| w[1] < w[0]) {
                return Err(CliError::Invalid("times must be ascending within [0, t_final]".into()));
            }
            let op = c.inner.operator(&r.spec, &OperatorJson::Named(name.to_string()))?;
            if let Some(&t) = ts.last() {
                delayline::cascade::check_cap(r.spec.copy_dim(), r.plan.interval_of(t).0, r.cap)?;
            }
            let states = reconstruct_series(&r.spec, &r.plan, &r.rho0, ts, r.tol)?;
            Ok(series_from_states(&states, &[op]).remove(0).values)
        };
        match run() {
            Ok(v) => {
                if len > 0 {
                    std::slice::from_raw_parts_mut(values, len).copy_from_slice(&v);
                }
                DlStatus::Ok
            }
            Err(e) => cli_error(e),
        }
    })
}

/// Run a command in memory. `command_code` is a `DlCommand` value.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_execute(cfg: *const DlConfig, command_code: i32, out: *mut *mut DlResult) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "out is null");
        }
        *out = ptr::null_mut();
        let Some(c) = cfg.as_ref() else {
            return simple_error(DlStatus::NullPointer, "null_pointer", "cfg is null");
        };
        let cmd = match command(command_code) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match execute(cmd, &c.inner, c.tol, c.max_intervals) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(DlResult { outcome }));
                DlStatus::Ok
            }
            Err(e) => cli_error(e),
        }
    })
}

/// Run a command and write CSV files plus the JSON sidecar into `out_dir`,
/// exactly as the command-line tool does. `command_code` is a `DlCommand` value;
/// non-positive `tol` and zero `max_intervals` keep the config's settings.
///
/// # Safety
/// `config_path` and `out_dir` must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dl_run_to_dir(
    config_path: *const c_char,
    command_code: i32,
    out_dir: *const c_char,
    tol: f64,
    max_intervals: usize,
) -> DlStatus {
    guard(|| {
        let (config, out) = match (str_arg(config_path), str_arg(out_dir)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let opts = Options {
            config: config.into(),
            out: out.into(),
            tol: (tol > 0.0).then_some(tol),
            max_intervals: (max_intervals > 0).then_some(max_intervals),
        };
        let cmd = match command(command_code) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match delayline::cli::run(cmd, &opts) {
            Ok(_) => DlStatus::Ok,
            Err(e) => cli_error(e),
        }
    })
}

/// # Safety
/// `res` must be null or a handle from `dl_execute` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dl_result_free(res: *mut DlResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Number of tables in a result; zero for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_result_table_count(res: *const DlResult) -> usize {
    res.as_ref().map_or(0, |r| r.outcome.tables.len())
}

/// Largest trace error reported by the run.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_result_max_trace_error(res: *const DlResult) -> f64 {
    res.as_ref().map_or(f64::NAN, |r| r.outcome.max_trace_error)
}

unsafe fn owned_string(res: *const DlResult, index: usize, out: *mut *mut c_char, f: impl Fn(&Outcome, usize) -> String) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "out is null");
        }
        *out = ptr::null_mut();
        let Some(r) = res.as_ref() else {
            return simple_error(DlStatus::NullPointer, "null_pointer", "result is null");
        };
        if index >= r.outcome.tables.len() {
            return simple_error(DlStatus::OutOfRange, "out_of_range", "table index out of range");
        }
        match CString::new(f(&r.outcome, index)) {
            Ok(s) => {
                *out = s.into_raw();
                DlStatus::Ok
            }
            Err(_) => simple_error(DlStatus::Computation, "computation", "string contains a nul byte"),
        }
    })
}

/// File stem of table `index` (e.g. "evolve"); free with `dl_string_free`.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_result_table_name(res: *const DlResult, index: usize, out: *mut *mut c_char) -> DlStatus {
    owned_string(res, index, out, |o, i| o.tables[i].0.clone())
}

/// CSV text of table `index`; free with `dl_string_free`.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_result_table_csv(res: *const DlResult, index: usize, out: *mut *mut c_char) -> DlStatus {
    owned_string(res, index, out, |o, i| o.tables[i].1.to_csv())
}

/// Diagnostics JSON of the run; free with `dl_string_free`.
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_result_diagnostics(res: *const DlResult, out: *mut *mut c_char) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return simple_error(DlStatus::NullPointer, "null_pointer", "out is null");
        }
        *out = ptr::null_mut();
        let Some(r) = res.as_ref() else {
            return simple_error(DlStatus::NullPointer, "null_pointer", "result is null");
        };
        let mut d = r.outcome.diagnostics.clone();
        d["max_trace_error"] = serde_json::json!(r.outcome.max_trace_error);
        *out = CString::new(d.to_string()).expect("json has no nul").into_raw();
        DlStatus::Ok
    })
}
