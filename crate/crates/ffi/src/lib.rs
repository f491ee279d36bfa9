//! C ABI over the equilibrium solver.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an [`MfeqStatus`];
//! on failure the message is available from [`mfeq_last_error`] on the same
//! thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mfeq::model::ProblemSpec;
use mfeq::riccati::{solve_equilibrium_system, EquilibriumSolution};
use mfeq::simulate::{evaluate_cost, simulate_closed_loop, RngConfig};
use mfeq::verify::{certify, Tolerances};
use mfeq::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfeqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidProblem = 3,
    SolverFailure = 4,
    NotCheckable = 5,
    OutOfRange = 6,
    BufferTooSmall = 7,
    Io = 8,
    Panic = 9,
}

/// A validated problem.
pub struct MfeqProblem {
    spec: ProblemSpec,
}

/// A solved equilibrium together with the problem it solves.
pub struct MfeqSolution {
    spec: ProblemSpec,
    eq: EquilibriumSolution,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MfeqCertificate {
    pub first_order_residual: f64,
    pub second_order_margin: f64,
    pub range_failures: usize,
    pub passes: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MfeqCostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MfeqStatus, msg: impl Into<String>) -> MfeqStatus {
    set_error(msg.into());
    status
}

fn from_error(err: Error) -> MfeqStatus {
    let status = match &err {
        Error::NotCheckable { .. } => MfeqStatus::NotCheckable,
        Error::NonFinite { .. } | Error::NoDiscreteEquilibrium(_) => MfeqStatus::SolverFailure,
        Error::Io(_) => MfeqStatus::Io,
        _ => MfeqStatus::InvalidProblem,
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> MfeqStatus) -> MfeqStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(MfeqStatus::Panic, "internal panic"))
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, MfeqStatus> {
    if s.is_null() {
        return Err(fail(MfeqStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(MfeqStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn into_problem(spec: mfeq::Result<ProblemSpec>, out: *mut *mut MfeqProblem) -> MfeqStatus {
    match spec.and_then(|s| s.ensure_valid().map(|_| s)) {
        Ok(spec) => {
            // SAFETY: callers checked `out` for null.
            unsafe { *out = Box::into_raw(Box::new(MfeqProblem { spec })) };
            MfeqStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Message of the last failure on this thread, or NULL. Owned by the library;
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mfeq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mfeq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a problem document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_problem_from_json(json: *const c_char, out: *mut *mut MfeqProblem) -> MfeqStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfeqStatus::NullPointer, "null output pointer");
        }
        match read_str(json) {
            Ok(s) => into_problem(ProblemSpec::from_json_str(s), out),
            Err(st) => st,
        }
    })
}

/// Reads, parses and validates a problem file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_problem_load(path: *const c_char, out: *mut *mut MfeqProblem) -> MfeqStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfeqStatus::NullPointer, "null output pointer");
        }
        match read_str(path) {
            Ok(p) => into_problem(ProblemSpec::from_json_file(std::path::Path::new(p)), out),
            Err(st) => st,
        }
    })
}

/// The same problem on a grid of `steps` cells.
///
/// # Safety
/// `problem` must come from this library and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_problem_regrid(problem: *const MfeqProblem, steps: usize, out: *mut *mut MfeqProblem) -> MfeqStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            return fail(MfeqStatus::NullPointer, "null argument");
        }
        into_problem((*problem).spec.regrid(steps), out)
    })
}

/// # Safety
/// `problem` must be a valid handle or NULL; any output pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mfeq_problem_dims(problem: *const MfeqProblem, n: *mut usize, m: *mut usize, steps: *mut usize) -> MfeqStatus {
    if problem.is_null() {
        return fail(MfeqStatus::NullPointer, "null problem");
    }
    let s = &(*problem).spec;
    for (p, v) in [(n, s.n), (m, s.m), (steps, s.grid.steps())] {
        if !p.is_null() {
            *p = v;
        }
    }
    MfeqStatus::Ok
}

/// # Safety
/// `problem` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mfeq_problem_free(problem: *mut MfeqProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Solves the equilibrium system.
///
/// # Safety
/// `problem` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_solve(problem: *const MfeqProblem, out: *mut *mut MfeqSolution) -> MfeqStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            return fail(MfeqStatus::NullPointer, "null argument");
        }
        let spec = (*problem).spec.clone();
        match solve_equilibrium_system(&spec) {
            Ok(eq) => {
                *out = Box::into_raw(Box::new(MfeqSolution { spec, eq }));
                MfeqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `solution` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mfeq_solution_free(solution: *mut MfeqSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Copies Θ* (m×n, row-major) and φ* (m) at grid node `node`.
///
/// # Safety
/// `theta` must hold `theta_len` doubles and `phi` `phi_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfeq_solution_gain(
    solution: *const MfeqSolution,
    node: usize,
    theta: *mut f64,
    theta_len: usize,
    phi: *mut f64,
    phi_len: usize,
) -> MfeqStatus {
    if solution.is_null() || theta.is_null() || phi.is_null() {
        return fail(MfeqStatus::NullPointer, "null argument");
    }
    let sol = &*solution;
    let (n, m) = (sol.spec.n, sol.spec.m);
    if node > sol.spec.grid.steps() {
        return fail(MfeqStatus::OutOfRange, format!("node {node} beyond {} steps", sol.spec.grid.steps()));
    }
    if theta_len < m * n || phi_len < m {
        return fail(MfeqStatus::BufferTooSmall, format!("need {} and {m} doubles", m * n));
    }
    let th = &sol.eq.law.theta[node];
    let out = std::slice::from_raw_parts_mut(theta, m * n);
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = th[(i, j)];
        }
    }
    std::slice::from_raw_parts_mut(phi, m).copy_from_slice(sol.eq.law.phi[node].as_slice());
    MfeqStatus::Ok
}

/// Deterministic part of the certificate (no Monte Carlo).
///
/// # Safety
/// `solution` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_solution_certify(
    solution: *const MfeqSolution,
    tol_first_order: f64,
    tol_margin: f64,
    out: *mut MfeqCertificate,
) -> MfeqStatus {
    guard(|| {
        if solution.is_null() || out.is_null() {
            return fail(MfeqStatus::NullPointer, "null argument");
        }
        let sol = &*solution;
        let cert = certify(&sol.spec, &sol.eq, Tolerances { first_order: tol_first_order, margin: tol_margin });
        *out = MfeqCertificate {
            first_order_residual: cert.first_order_residual,
            second_order_margin: cert.second_order_margin,
            range_failures: cert.range_failures,
            passes: cert.passes(),
        };
        MfeqStatus::Ok
    })
}

/// Monte Carlo cost of the closed-loop equilibrium.
///
/// # Safety
/// `solution` must be a valid handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfeq_solution_cost(solution: *const MfeqSolution, seed: u64, samples: usize, out: *mut MfeqCostEstimate) -> MfeqStatus {
    guard(|| {
        if solution.is_null() || out.is_null() {
            return fail(MfeqStatus::NullPointer, "null argument");
        }
        if samples < 2 {
            return fail(MfeqStatus::OutOfRange, "need at least 2 samples");
        }
        let sol = &*solution;
        let est = simulate_closed_loop(&sol.spec, &sol.eq.law, &RngConfig::new(seed), samples).and_then(|e| evaluate_cost(&sol.spec, &e));
        match est {
            Ok(c) => {
                *out = MfeqCostEstimate { mean: c.mean, std_error: c.std_error, samples: c.samples };
                MfeqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
