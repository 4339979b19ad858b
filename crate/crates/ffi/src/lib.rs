//! C ABI for liqlab.
//!
//! Objects are opaque handles created by `*_new`/`*_parse`/`liqlab_simulate`
//! style constructors and released with the matching `*_free`. Every fallible
//! function returns a [`LiqlabStatus`]; on failure the message is available from
//! [`liqlab_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::OnceLock;

use liqlab::bsde::BsdeConfig;
use liqlab::cli::{run, RunError};
use liqlab::config::{ConfigError, ScenarioConfig};
use liqlab::lab::{hat_solution, replication_on_bundle, ReplicationReport};
use liqlab::model::{simulate_paths, PathBundle};
use liqlab::report::version_string;
use liqlab::swaps::swap_price;
use liqlab::LabError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiqlabStatus {
    Ok = 0,
    NullPointer = 1,
    /// Input rejected: parse error, unknown key or violated precondition.
    InvalidArgument = 2,
    /// The numerical method failed (singular system, rank-deficient regression, divergence).
    NumericalFailure = 3,
    IoError = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Per-node arrays of a simulated bundle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiqlabField {
    S = 0,
    U = 1,
    V = 2,
    Sigma = 3,
    M = 4,
    RealizedVariance = 5,
}

/// Headline numbers of a replication run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LiqlabReplicationSummary {
    pub h0_limit: f64,
    pub h0_limit_stderr: f64,
    pub hprime0_analytic: f64,
    pub hprime0_analytic_stderr: f64,
    pub hprime0_fd: f64,
    pub hprime0_fd_stderr: f64,
    pub h0_loglog_slope: f64,
    pub impact_loglog_slope: f64,
    pub n_sizes: usize,
}

/// Scenario configuration.
pub struct LiqlabConfig(ScenarioConfig);

/// Simulated paths, arrays `[node, path]`.
pub struct LiqlabPaths(PathBundle);

/// Replication cost curve.
pub struct LiqlabReplication(ReplicationReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LiqlabStatus, msg: impl Into<String>) -> LiqlabStatus {
    set_error(msg);
    status
}

fn lab_status(e: &LabError) -> LiqlabStatus {
    if e.is_numerical() {
        LiqlabStatus::NumericalFailure
    } else {
        LiqlabStatus::InvalidArgument
    }
}

fn run_status(e: &RunError) -> LiqlabStatus {
    match e.exit_code() {
        3 => LiqlabStatus::NumericalFailure,
        2 => LiqlabStatus::InvalidArgument,
        _ => LiqlabStatus::IoError,
    }
}

/// Runs `f`, converting panics into [`LiqlabStatus::Panic`].
fn guard(f: impl FnOnce() -> LiqlabStatus) -> LiqlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(LiqlabStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, LiqlabStatus> {
    if p.is_null() {
        return Err(fail(LiqlabStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LiqlabStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(LiqlabStatus::NullPointer, concat!($name, " is null"));
        }
    };
}

fn boxed<T>(out: *mut *mut T, value: T) -> LiqlabStatus {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    LiqlabStatus::Ok
}

/// Library version, e.g. `liqlab 0.1.0`. Static; do not free.
#[no_mangle]
pub extern "C" fn liqlab_version() -> *const c_char {
    static V: OnceLock<CString> = OnceLock::new();
    V.get_or_init(|| CString::new(version_string()).expect("no nul")).as_ptr()
}

/// Message of the last failure on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn liqlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default scenario.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_new(out: *mut *mut LiqlabConfig) -> LiqlabStatus {
    non_null!(out, "out");
    guard(|| boxed(out, LiqlabConfig(ScenarioConfig::default())))
}

/// Parses scenario text (`key = value` lines under `[section]` headers).
///
/// # Safety
/// `text` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_parse(text: *const c_char, out: *mut *mut LiqlabConfig) -> LiqlabStatus {
    non_null!(out, "out");
    let text = try_ffi!(str_arg(text, "text"));
    guard(|| match ScenarioConfig::parse_str(text) {
        Ok(c) => boxed(out, LiqlabConfig(c)),
        Err(e) => fail(LiqlabStatus::InvalidArgument, e.to_string()),
    })
}

/// Applies `key=value` or `section.key=value`.
///
/// # Safety
/// `cfg` must come from this library; `assignment` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_set(cfg: *mut LiqlabConfig, assignment: *const c_char) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    let text = try_ffi!(str_arg(assignment, "assignment"));
    let cfg = &mut *cfg;
    guard(|| match cfg.0.apply_override(text) {
        Ok(()) => LiqlabStatus::Ok,
        Err(e) => fail(LiqlabStatus::InvalidArgument, e.to_string()),
    })
}

/// Checks the scenario for `experiment` (`simulate`, `ledger`, `swaps`, `bsde`,
/// `replicate` or `arbitrage-test`).
///
/// # Safety
/// `cfg` must come from this library; `experiment` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_validate(cfg: *const LiqlabConfig, experiment: *const c_char) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    let experiment = try_ffi!(str_arg(experiment, "experiment"));
    let cfg = &*cfg;
    guard(|| {
        let c = ScenarioConfig { experiment: experiment.into(), ..cfg.0.clone() };
        match c.validate() {
            Ok(()) => LiqlabStatus::Ok,
            Err(e) => fail(LiqlabStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Canonical text of the scenario; free with [`liqlab_string_free`].
///
/// # Safety
/// `cfg` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_to_string(cfg: *const LiqlabConfig, out: *mut *mut c_char) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    non_null!(out, "out");
    let cfg = &*cfg;
    guard(|| {
        *out = CString::new(cfg.0.to_ini()).expect("no nul").into_raw();
        LiqlabStatus::Ok
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn liqlab_config_free(cfg: *mut LiqlabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn liqlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs a subcommand exactly as the command-line tool does, writing into `out_dir`.
///
/// # Safety
/// `cfg` must come from this library; the strings must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn liqlab_run(
    cfg: *const LiqlabConfig,
    command: *const c_char,
    out_dir: *const c_char,
) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    let command = try_ffi!(str_arg(command, "command"));
    let out_dir = try_ffi!(str_arg(out_dir, "out_dir"));
    let cfg = &*cfg;
    guard(|| {
        let c = ScenarioConfig { out: Path::new(out_dir).display().to_string(), ..cfg.0.clone() };
        match run(command, &c) {
            Ok(_) => LiqlabStatus::Ok,
            Err(e) => fail(run_status(&e), e.to_string()),
        }
    })
}

fn config_status(e: ConfigError) -> LiqlabStatus {
    fail(LiqlabStatus::InvalidArgument, e.to_string())
}

/// Simulates `n_paths` paths of the scenario with its seed.
///
/// # Safety
/// `cfg` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_simulate(cfg: *const LiqlabConfig, out: *mut *mut LiqlabPaths) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    non_null!(out, "out");
    let cfg = &*cfg;
    guard(|| {
        let params = match cfg.0.model_params() {
            Ok(p) => p,
            Err(e) => return config_status(e),
        };
        let grid = match cfg.0.grid() {
            Ok(g) => g,
            Err(e) => return config_status(e),
        };
        match simulate_paths(&params, &grid, cfg.0.n_paths, cfg.0.seed) {
            Ok(b) => boxed(out, LiqlabPaths(b)),
            Err(e) => fail(lab_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `paths` must come from this library; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_paths_shape(
    paths: *const LiqlabPaths,
    n_nodes: *mut usize,
    n_paths: *mut usize,
) -> LiqlabStatus {
    non_null!(paths, "paths");
    non_null!(n_nodes, "n_nodes");
    non_null!(n_paths, "n_paths");
    let b = &(*paths).0;
    *n_nodes = b.n_nodes();
    *n_paths = b.n_paths();
    LiqlabStatus::Ok
}

/// Copies one field into `buf` in `[node, path]` row-major order; `len` must be
/// `n_nodes * n_paths`.
///
/// # Safety
/// `paths` must come from this library and `buf` hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn liqlab_paths_copy(
    paths: *const LiqlabPaths,
    field: LiqlabField,
    buf: *mut f64,
    len: usize,
) -> LiqlabStatus {
    non_null!(paths, "paths");
    non_null!(buf, "buf");
    let b = &(*paths).0;
    let a = match field {
        LiqlabField::S => &b.s,
        LiqlabField::U => &b.u,
        LiqlabField::V => &b.v,
        LiqlabField::Sigma => &b.sigma,
        LiqlabField::M => &b.m,
        LiqlabField::RealizedVariance => &b.rv,
    };
    if len != a.len() {
        return fail(
            LiqlabStatus::InvalidArgument,
            format!("buffer holds {len} values, field has {}", a.len()),
        );
    }
    let dst = std::slice::from_raw_parts_mut(buf, len);
    for (d, s) in dst.iter_mut().zip(a.iter()) {
        *d = *s;
    }
    LiqlabStatus::Ok
}

/// # Safety
/// `paths` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn liqlab_paths_free(paths: *mut LiqlabPaths) {
    if !paths.is_null() {
        drop(Box::from_raw(paths));
    }
}

/// Value at time `t` of swap `which` (1 or 2) given `U`, `V` and realized variance.
///
/// # Safety
/// `cfg` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_swap_price(
    cfg: *const LiqlabConfig,
    which: u32,
    t: f64,
    u: f64,
    v: f64,
    rv: f64,
    out: *mut f64,
) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    non_null!(out, "out");
    let cfg = &*cfg;
    guard(|| {
        if !(which == 1 || which == 2) {
            return fail(LiqlabStatus::InvalidArgument, format!("swap index must be 1 or 2, got {which}"));
        }
        let params = match cfg.0.model_params() {
            Ok(p) => p,
            Err(e) => return config_status(e),
        };
        let spec = cfg.0.term_sheet().swaps[which as usize - 1];
        match swap_price(t, u, v, rv, &params, &spec) {
            Ok(g) => {
                *out = g;
                LiqlabStatus::Ok
            }
            Err(e) => fail(lab_status(&e), e.to_string()),
        }
    })
}

/// Replication cost curve over the scenario's sizes `xs`.
///
/// # Safety
/// `cfg` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_replicate(cfg: *const LiqlabConfig, out: *mut *mut LiqlabReplication) -> LiqlabStatus {
    non_null!(cfg, "cfg");
    non_null!(out, "out");
    let cfg = &*cfg;
    guard(|| {
        let c = ScenarioConfig { experiment: "replicate".into(), ..cfg.0.clone() };
        if let Err(e) = c.validate() {
            return config_status(e);
        }
        let result = (|| -> Result<ReplicationReport, LabError> {
            let params = c.model_params().map_err(|e| LabError::InvalidParams(e.to_string()))?;
            let grid = c.grid().map_err(|e| LabError::InvalidParams(e.to_string()))?;
            let payoff = c.truncated_payoff();
            let config: BsdeConfig = c.bsde_config();
            let bundle = simulate_paths(&params, &grid, c.n_paths, c.seed)?;
            let hat = hat_solution(&bundle, &params, &payoff, &config, None)?;
            replication_on_bundle(&bundle, &params, &payoff, &c.xs, &config, &hat)
        })();
        match result {
            Ok(r) => boxed(out, LiqlabReplication(r)),
            Err(e) => fail(lab_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `rep` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_replication_summary(
    rep: *const LiqlabReplication,
    out: *mut LiqlabReplicationSummary,
) -> LiqlabStatus {
    non_null!(rep, "rep");
    non_null!(out, "out");
    let r = &(*rep).0;
    *out = LiqlabReplicationSummary {
        h0_limit: r.h0_limit,
        h0_limit_stderr: r.h0_limit_stderr,
        hprime0_analytic: r.hprime0_analytic,
        hprime0_analytic_stderr: r.hprime0_analytic_stderr,
        hprime0_fd: r.hprime0_fd,
        hprime0_fd_stderr: r.hprime0_fd_stderr,
        h0_loglog_slope: r.h0_loglog_slope,
        impact_loglog_slope: r.impact_loglog_slope,
        n_sizes: r.rows.len(),
    };
    LiqlabStatus::Ok
}

/// Full report as JSON; free with [`liqlab_string_free`].
///
/// # Safety
/// `rep` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn liqlab_replication_json(rep: *const LiqlabReplication, out: *mut *mut c_char) -> LiqlabStatus {
    non_null!(rep, "rep");
    non_null!(out, "out");
    let r = &(*rep).0;
    guard(|| {
        *out = CString::new(r.to_json()).expect("no nul").into_raw();
        LiqlabStatus::Ok
    })
}

/// # Safety
/// `rep` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn liqlab_replication_free(rep: *mut LiqlabReplication) {
    if !rep.is_null() {
        drop(Box::from_raw(rep));
    }
}
