//! C ABI over `ticontrol`.
//!
//! Every entry point returns a [`TicStatus`]. On failure the message is kept
//! per thread and read back with [`tic_last_error_message`]. Configs and
//! solutions cross the boundary as opaque handles owned by the caller and
//! released with the matching `_free` function. Panics never unwind into C:
//! they surface as [`TicStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ticontrol::cli::{build_problem, run_equilibrium};
use ticontrol::config::RunConfig;
use ticontrol::equilibrium::Verdict;
use ticontrol::error::Error;
use ticontrol::hjbx::{residual_report, solve_extended_hjb, Solution};
use ticontrol::model::{validate_problem, Registry};
use ticontrol::regulator::{constant_control_values, regulator_closed_form, RegulatorParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Domain = 4,
    Stability = 5,
    Evaluation = 6,
    Io = 7,
    Format = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicVerdict {
    Pass = 0,
    Fail = 1,
    Inconclusive = 2,
}

impl From<Verdict> for TicVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Pass => TicVerdict::Pass,
            Verdict::Fail => TicVerdict::Fail,
            Verdict::Inconclusive => TicVerdict::Inconclusive,
        }
    }
}

/// Regulator with `U = [−a, a]`, noise `sigma`, horizon `horizon` and
/// comparison anchor `x0`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TicRegulatorParams {
    pub a: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl From<TicRegulatorParams> for RegulatorParams {
    fn from(p: TicRegulatorParams) -> Self {
        RegulatorParams {
            a: p.a,
            sigma: p.sigma,
            horizon: p.horizon,
            x0: p.x0,
        }
    }
}

/// Exact regulator values under a constant control.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TicControlValues {
    pub f: f64,
    pub g: f64,
    pub j: f64,
}

/// Opaque run configuration.
pub struct TicConfig {
    inner: RunConfig,
}

/// Opaque solver output.
pub struct TicSolution {
    inner: Solution,
}

struct Failure {
    status: TicStatus,
    message: String,
}

impl Failure {
    fn new(status: TicStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }

    fn null(what: &str) -> Self {
        Failure::new(TicStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Domain(_) => TicStatus::Domain,
            Error::Evaluation { .. } | Error::NonFinite { .. } => TicStatus::Evaluation,
            Error::Unsupported(_) => TicStatus::InvalidArgument,
            Error::Stability { .. } => TicStatus::Stability,
            Error::Config(_) => TicStatus::Config,
            Error::Io(_) => TicStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) => TicStatus::Format,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    // Interior NULs would truncate the message; replace them.
    let msg = CString::new(msg.replace('\0', "?")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard<F>(f: F) -> TicStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TicStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            TicStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(TicStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(TicStatus::Format, "string contains a nul byte"))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a JSON run configuration into `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_config_from_json(
    json: *const c_char,
    out: *mut *mut TicConfig,
) -> TicStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = RunConfig::from_json(as_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(TicConfig { inner }));
        Ok(())
    })
}

/// Default regulator run for `params`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_config_regulator(
    params: TicRegulatorParams,
    out: *mut *mut TicConfig,
) -> TicStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let p = RegulatorParams::from(params);
        p.validate()?;
        *out = Box::into_raw(Box::new(TicConfig {
            inner: RunConfig::regulator(p),
        }));
        Ok(())
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tic_config_set_seed(cfg: *mut TicConfig, seed: u64) -> TicStatus {
    guard(|| {
        out_ref(cfg, "cfg")?.inner.seed = seed;
        Ok(())
    })
}

/// Canonical JSON form of the config; free with [`tic_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_config_to_json(
    cfg: *const TicConfig,
    out: *mut *mut c_char,
) -> TicStatus {
    guard(|| {
        let cfg = as_ref(cfg, "cfg")?;
        let out = out_ref(out, "out")?;
        *out = to_c_string(cfg.inner.canonical_json())?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn tic_config_free(cfg: *mut TicConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the assumption checks. `*all_pass` is false when any check fails,
/// including problem data the builder rejects.
///
/// # Safety
/// `cfg` must be a live handle and `all_pass` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_validate(cfg: *const TicConfig, all_pass: *mut bool) -> TicStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.inner;
        let all_pass = out_ref(all_pass, "all_pass")?;
        *all_pass = match cfg.problem.build(&Registry::with_builtins()) {
            Ok(spec) => validate_problem(&spec, cfg.validation.probes, cfg.seed).all_pass,
            Err(Error::Domain(_)) => false,
            Err(e) => return Err(e.into()),
        };
        Ok(())
    })
}

/// Solves the extended system on the configured grid.
///
/// # Safety
/// `cfg` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_solve(cfg: *const TicConfig, out: *mut *mut TicSolution) -> TicStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.inner;
        let out = out_ref(out, "out")?;
        let (spec, grid) = build_problem(cfg, &Registry::with_builtins())?;
        let inner = solve_extended_hjb(&spec, &grid, &cfg.solver)?;
        *out = Box::into_raw(Box::new(TicSolution { inner }));
        Ok(())
    })
}

/// # Safety
/// `sol` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_free(sol: *mut TicSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// # Safety
/// `sol` must be a live handle and `converged` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_converged(
    sol: *const TicSolution,
    converged: *mut bool,
) -> TicStatus {
    guard(|| {
        *out_ref(converged, "converged")? = as_ref(sol, "sol")?.inner.log.converged;
        Ok(())
    })
}

/// Number of time nodes, spatial nodes and control components. Tables are
/// laid out time-major with the last spatial axis fastest.
///
/// # Safety
/// `sol` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_shape(
    sol: *const TicSolution,
    n_t: *mut usize,
    n_x: *mut usize,
    n_u: *mut usize,
) -> TicStatus {
    guard(|| {
        let sol = &as_ref(sol, "sol")?.inner;
        *out_ref(n_t, "n_t")? = sol.grid.t.len();
        *out_ref(n_x, "n_x")? = sol.grid.x.size();
        *out_ref(n_u, "n_u")? = sol.control_table.arity();
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(Failure::null("buf"));
    }
    if len < src.len() {
        return Err(Failure::new(
            TicStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Copies the value table `V` (`n_t · n_x` entries) into `buf`.
///
/// # Safety
/// `sol` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_copy_value(
    sol: *const TicSolution,
    buf: *mut f64,
    len: usize,
) -> TicStatus {
    guard(|| copy_out(as_ref(sol, "sol")?.inner.candidate.v.values(), buf, len))
}

/// Copies the control table (`n_t · n_x · n_u` entries) into `buf`.
///
/// # Safety
/// `sol` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_copy_control(
    sol: *const TicSolution,
    buf: *mut f64,
    len: usize,
) -> TicStatus {
    guard(|| copy_out(as_ref(sol, "sol")?.inner.control_table.values(), buf, len))
}

/// Interpolated `V(t, x)` with `x` of length `dim`.
///
/// # Safety
/// `sol` must be a live handle, `x` must hold `dim` doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tic_solution_value_at(
    sol: *const TicSolution,
    t: f64,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> TicStatus {
    guard(|| {
        let sol = &as_ref(sol, "sol")?.inner;
        if x.is_null() {
            return Err(Failure::null("x"));
        }
        if dim != sol.grid.x.dim() {
            return Err(Failure::new(
                TicStatus::InvalidArgument,
                format!("x has {dim} components, the grid {}", sol.grid.x.dim()),
            ));
        }
        let x = std::slice::from_raw_parts(x, dim);
        *out_ref(out, "out")? = sol.candidate.v.interpolate_scalar(t, x, None)?;
        Ok(())
    })
}

/// Residual report of `sol`, or of the closed form when `sol` is NULL
/// (regulator configs only). `report_json` may be NULL; otherwise it
/// receives a string to free with [`tic_string_free`].
///
/// # Safety
/// `cfg` must be a live handle, `sol` NULL or live, `pass` writable and
/// `report_json` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn tic_residual(
    cfg: *const TicConfig,
    sol: *const TicSolution,
    pass: *mut bool,
    report_json: *mut *mut c_char,
) -> TicStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.inner;
        let pass = out_ref(pass, "pass")?;
        let (spec, grid) = build_problem(cfg, &Registry::with_builtins())?;
        let owned;
        let (cand, grid) = match sol.as_ref() {
            Some(s) => (&s.inner.candidate, s.inner.grid.clone()),
            None => {
                let p = cfg.problem.regulator().ok_or_else(|| {
                    Failure::new(
                        TicStatus::InvalidArgument,
                        "a solution is required for problems without a closed form",
                    )
                })?;
                owned = regulator_closed_form(p)?.tabulate(&spec, &grid)?;
                (&owned, grid)
            }
        };
        let report = residual_report(cand, &spec, &grid, &cfg.thresholds)?;
        *pass = report.pass;
        if let Some(out) = report_json.as_mut() {
            *out = to_c_string(serde_json::to_string(&report).map_err(Error::from)?)?;
        }
        Ok(())
    })
}

/// Monte Carlo equilibrium test of the configured base control.
/// `report_json` may be NULL; otherwise it receives a string to free with
/// [`tic_string_free`].
///
/// # Safety
/// `cfg` must be a live handle, `verdict` writable and `report_json` NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tic_equilibrium(
    cfg: *const TicConfig,
    verdict: *mut TicVerdict,
    report_json: *mut *mut c_char,
) -> TicStatus {
    guard(|| {
        let cfg = &as_ref(cfg, "cfg")?.inner;
        let verdict = out_ref(verdict, "verdict")?;
        let (spec, grid) = build_problem(cfg, &Registry::with_builtins())?;
        let report = run_equilibrium(cfg, &spec, &grid)?;
        *verdict = report.verdict.into();
        if let Some(out) = report_json.as_mut() {
            *out = to_c_string(serde_json::to_string(&report).map_err(Error::from)?)?;
        }
        Ok(())
    })
}

/// Exact `f(t, x, y)`, `g(t, x)` and `J(t, x)` of the regulator under the
/// constant control `u`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tic_regulator_constant_control(
    params: TicRegulatorParams,
    u: f64,
    t: f64,
    x: f64,
    y: f64,
    out: *mut TicControlValues,
) -> TicStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let v = constant_control_values(&params.into(), u, t, x, y)?;
        *out = TicControlValues {
            f: v.f,
            g: v.g,
            j: v.j,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failures_set_and_successes_clear_the_message() {
        let st = guard(|| Err(Failure::new(TicStatus::Domain, "bad")));
        assert_eq!(st, TicStatus::Domain);
        let msg = unsafe { CStr::from_ptr(tic_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "bad");
        assert_eq!(guard(|| Ok(())), TicStatus::Ok);
        assert!(tic_last_error_message().is_null());
    }

    #[test]
    fn panics_are_caught() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, TicStatus::Panic);
        let msg = unsafe { CStr::from_ptr(tic_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
    }

    #[test]
    fn messages_with_nul_survive() {
        set_last_error("a\0b");
        let msg = unsafe { CStr::from_ptr(tic_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "a?b");
    }

    #[test]
    fn error_kinds_map_to_statuses() {
        let f = Failure::from(Error::Stability {
            dt: 1.0,
            required_dt: 0.5,
        });
        assert_eq!(f.status, TicStatus::Stability);
        assert_eq!(
            Failure::from(Error::Config("x".into())).status,
            TicStatus::Config
        );
    }
}
