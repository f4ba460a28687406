//! C ABI over `sim_isac`.
//!
//! Every function returns a [`SimIsacStatus`]; on failure the message is
//! available from [`sim_isac_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sim_isac::experiments::{solve, Solved};
use sim_isac::fisher::bcrb_of;
use sim_isac::linalg::Mat5;
use sim_isac::metrics::link_report;
use sim_isac::pipeline::{parse_stages, run};
use sim_isac::scenario::ScenarioConfig;
use sim_isac::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimIsacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dependency = 4,
    InfeasibleQos = 5,
    Numerical = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Scenario configuration.
pub struct SimIsacScenario {
    config: ScenarioConfig,
}

/// Optimized beams and the data needed to evaluate them.
pub struct SimIsacSolution {
    solved: Solved,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SimIsacStatus {
    match e {
        Error::InvalidInput(_) => SimIsacStatus::InvalidArgument,
        Error::Config { .. } => SimIsacStatus::Config,
        Error::Dependency { .. } => SimIsacStatus::Dependency,
        Error::InfeasibleQos { .. } => SimIsacStatus::InfeasibleQos,
        Error::Io(_) | Error::Serde(_) => SimIsacStatus::Io,
        Error::DegenerateGeometry(_)
        | Error::Singular { .. }
        | Error::BracketFailure { .. }
        | Error::ToleranceFailure { .. }
        | Error::NonFinite(_) => SimIsacStatus::Numerical,
    }
}

struct Fail(SimIsacStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SimIsacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SimIsacStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SimIsacStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SimIsacStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SimIsacStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn sim_isac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sim_isac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates the built-in desk scenario.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_scenario_default(out: *mut *mut SimIsacScenario) -> SimIsacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(SimIsacScenario { config: ScenarioConfig::default() }));
        Ok(())
    })
}

/// Parses and validates a TOML scenario.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_scenario_from_toml(toml: *const c_char, out: *mut *mut SimIsacScenario) -> SimIsacStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let config = ScenarioConfig::from_toml_str(string(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(SimIsacScenario { config }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from a `sim_isac_scenario_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_scenario_free(scenario: *mut SimIsacScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_scenario_set_seed(scenario: *mut SimIsacScenario, seed: u64) -> SimIsacStatus {
    guard(|| {
        out_ref(scenario, "scenario")?.config.scene.rng_seed = seed;
        Ok(())
    })
}

/// Writes the hex scenario hash (64 chars plus NUL) into `buf`.
///
/// # Safety
/// `scenario` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_scenario_hash(scenario: *const SimIsacScenario, buf: *mut c_char, len: usize) -> SimIsacStatus {
    guard(|| {
        let hash = deref(scenario, "scenario")?.config.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < hash.len() + 1 {
            return Err(Fail(SimIsacStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1)));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// Runs pipeline stages ("all" or a comma-separated list) into `out_dir`.
///
/// # Safety
/// `scenario` must be a live handle; `stages` and `out_dir` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_run(
    scenario: *const SimIsacScenario,
    stages: *const c_char,
    out_dir: *const c_char,
) -> SimIsacStatus {
    guard(|| {
        let cfg = &deref(scenario, "scenario")?.config;
        let stages = parse_stages(string(stages, "stages")?)?;
        run(cfg, &stages, Path::new(string(out_dir, "out_dir")?))?;
        Ok(())
    })
}

/// Synthesizes channels and runs the beam optimizer.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solve(scenario: *const SimIsacScenario, out: *mut *mut SimIsacSolution) -> SimIsacStatus {
    guard(|| {
        let cfg = &deref(scenario, "scenario")?.config;
        let out = out_ref(out, "out")?;
        let solved = solve(cfg)?;
        *out = Box::into_raw(Box::new(SimIsacSolution { solved }));
        Ok(())
    })
}

/// # Safety
/// `solution` must come from [`sim_isac_solve`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solution_free(solution: *mut SimIsacSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Number of subcarriers and SIM elements per layer.
///
/// # Safety
/// `solution` must be a live handle; the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solution_shape(
    solution: *const SimIsacSolution,
    subcarriers: *mut usize,
    elements: *mut usize,
) -> SimIsacStatus {
    guard(|| {
        let cfg = &deref(solution, "solution")?.solved.config;
        *out_ref(subcarriers, "subcarriers")? = cfg.num_subcarriers();
        *out_ref(elements, "elements")? = cfg.num_elements();
        Ok(())
    })
}

/// BCRB of the optimized beams.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solution_bcrb(solution: *const SimIsacSolution, out: *mut f64) -> SimIsacStatus {
    guard(|| {
        let s = &deref(solution, "solution")?.solved;
        *out_ref(out, "out")? = s.targets.bfim.bcrb;
        Ok(())
    })
}

/// Average PU spectral efficiency relative to its interference-free value.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solution_qos_ratio(solution: *const SimIsacSolution, out: *mut f64) -> SimIsacStatus {
    guard(|| {
        let s = &deref(solution, "solution")?.solved;
        *out_ref(out, "out")? = link_report(&s.targets.f_hat, &s.channels, &s.config)?.qos_ratio;
        Ok(())
    })
}

/// Copies the beam of subcarrier `i` as interleaved (re, im) pairs; `len`
/// counts doubles and must be at least twice the element count.
///
/// # Safety
/// `solution` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_solution_beam(
    solution: *const SimIsacSolution,
    i: usize,
    out: *mut f64,
    len: usize,
) -> SimIsacStatus {
    guard(|| {
        let s = &deref(solution, "solution")?.solved;
        let f = s
            .targets
            .f_hat
            .get(i)
            .ok_or_else(|| Fail(SimIsacStatus::InvalidArgument, format!("subcarrier {i} out of range")))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < 2 * f.len() {
            return Err(Fail(SimIsacStatus::BufferTooSmall, format!("need {} doubles", 2 * f.len())));
        }
        let dst = std::slice::from_raw_parts_mut(out, 2 * f.len());
        for (k, z) in f.iter().enumerate() {
            dst[2 * k] = z.re;
            dst[2 * k + 1] = z.im;
        }
        Ok(())
    })
}

/// tr of the upper-left 3x3 block of J⁻¹ for a row-major 5x5 SPD matrix.
///
/// # Safety
/// `fim` must point to 25 doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sim_isac_bcrb_from_fim(fim: *const f64, out: *mut f64) -> SimIsacStatus {
    guard(|| {
        if fim.is_null() {
            return Err(null("fim"));
        }
        let j = Mat5::from_row_slice(std::slice::from_raw_parts(fim, 25));
        *out_ref(out, "out")? = bcrb_of(&j)?;
        Ok(())
    })
}
