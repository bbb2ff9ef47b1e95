//! C ABI for the sparse-ekp solvers.
//!
//! Conventions: every function returns an `i32` status from [`SekpStatus`]
//! (0 = ok); objects cross the boundary as opaque pointers freed by the
//! matching `*_free`; vectors are copied into caller-provided buffers. On any
//! non-ok status, `sekp_last_error_message` describes the failure for the
//! calling thread. The committed header lives at `include/sparse_ekp.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DVector;
use sparse_ekp::driver::{run_outer, OuterConfig, RunRecord, Variant};
use sparse_ekp::kalman::KalmanConfig;
use sparse_ekp::model::InverseProblem;
use sparse_ekp::problems::{make_linear_problem, EllipticProblem, TransportProblem};
use sparse_ekp::HyperParams;

/// Status codes returned by every entry point.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SekpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    RuntimeError = 3,
    OutOfRange = 4,
    Diverged = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() =
            CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    });
}

fn fail(status: SekpStatus, message: impl Into<String>) -> i32 {
    set_error(message);
    status as i32
}

/// Opaque problem handle.
pub struct SekpProblem {
    inner: InverseProblem,
}

/// Opaque run-record handle.
pub struct SekpRunRecord {
    inner: RunRecord,
    dimension: usize,
}

/// Solver options; a plain struct so bindings stay trivial.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SekpRunOptions {
    /// 0 = IEKF, 1 = IEKF-SL.
    pub variant: i32,
    pub ensemble_size: usize,
    /// Inner iteration budget T.
    pub inner_iterations: usize,
    /// Number of regularization (theta-update) iterations; the record holds
    /// outer_iterations + 1 rows, row 0 being the vanilla solve.
    pub outer_iterations: usize,
    pub alpha: f64,
    /// Regularization parameter r > 0 (generalized-gamma closed form).
    pub r: f64,
    /// Initial variance theta0 broadcast to every component.
    pub theta0: f64,
    /// Scale parameter vartheta broadcast to every component.
    pub vartheta: f64,
    /// Relative-change stopping tolerance; <= 0 disables it.
    pub rel_tol: f64,
}

/// Per-iteration metrics; NaN marks metrics unavailable for the problem.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SekpMetrics {
    pub l2_error: f64,
    pub avg_width: f64,
    pub off_support_norm: f64,
    pub misfit: f64,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sekp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the last failure on this thread; valid until the next
/// failing call from the same thread.
#[no_mangle]
pub extern "C" fn sekp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in sparse-ekp".to_string());
            fail(SekpStatus::RuntimeError, message)
        }
    }
}

fn emit_problem(out: *mut *mut SekpProblem, problem: InverseProblem) -> i32 {
    if out.is_null() {
        return fail(SekpStatus::NullPointer, "out pointer is null");
    }
    let handle = Box::new(SekpProblem { inner: problem });
    unsafe { *out = Box::into_raw(handle) };
    SekpStatus::Ok as i32
}

/// Build the linear compressed-sensing benchmark.
///
/// # Safety
/// `out` must be a valid pointer to a problem-handle slot.
#[no_mangle]
pub unsafe extern "C" fn sekp_problem_linear(
    dim: usize,
    observations: usize,
    sparsity: usize,
    seed: u64,
    out: *mut *mut SekpProblem,
) -> i32 {
    guarded(|| {
        if dim == 0 || observations == 0 {
            return fail(SekpStatus::InvalidArgument, "dimensions must be positive");
        }
        if sparsity > dim {
            return fail(SekpStatus::InvalidArgument, "sparsity exceeds dimension");
        }
        emit_problem(out, make_linear_problem(dim, observations, sparsity, seed).problem)
    })
}

/// Build the transport benchmark (d = 60, k = 441).
///
/// # Safety
/// `out` must be a valid pointer to a problem-handle slot.
#[no_mangle]
pub unsafe extern "C" fn sekp_problem_transport(seed: u64, out: *mut *mut SekpProblem) -> i32 {
    guarded(|| emit_problem(out, TransportProblem::new(seed).problem))
}

/// Build the elliptic benchmark (d = 400, k = 210).
///
/// # Safety
/// `out` must be a valid pointer to a problem-handle slot.
#[no_mangle]
pub unsafe extern "C" fn sekp_problem_elliptic(seed: u64, out: *mut *mut SekpProblem) -> i32 {
    guarded(|| emit_problem(out, EllipticProblem::new(seed).problem))
}

/// State and observation dimensions of a problem.
///
/// # Safety
/// All pointers must be valid; `problem` must come from a constructor.
#[no_mangle]
pub unsafe extern "C" fn sekp_problem_dims(
    problem: *const SekpProblem,
    dim: *mut usize,
    observations: *mut usize,
) -> i32 {
    guarded(|| {
        if problem.is_null() || dim.is_null() || observations.is_null() {
            return fail(SekpStatus::NullPointer, "null pointer argument");
        }
        let p = unsafe { &*problem };
        unsafe {
            *dim = p.inner.input_dim();
            *observations = p.inner.output_dim();
        }
        SekpStatus::Ok as i32
    })
}

/// Release a problem handle. Null is a no-op.
///
/// # Safety
/// `problem` must be a pointer from a constructor, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sekp_problem_free(problem: *mut SekpProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Fill `options` with the defaults used by the benchmark studies.
///
/// # Safety
/// `options` must point to writable memory of the right size.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_options_default(options: *mut SekpRunOptions) -> i32 {
    guarded(|| {
        if options.is_null() {
            return fail(SekpStatus::NullPointer, "options pointer is null");
        }
        unsafe {
            *options = SekpRunOptions {
                variant: 0,
                ensemble_size: 100,
                inner_iterations: 20,
                outer_iterations: 3,
                alpha: 0.5,
                r: 1.0 / 3.0,
                theta0: 0.1,
                vartheta: 1.0,
                rel_tol: 0.0,
            };
        }
        SekpStatus::Ok as i32
    })
}

/// Run the outer alternating solver with the given options and master seed.
///
/// # Safety
/// `problem` and `options` must be valid; `out` must point to a record slot.
#[no_mangle]
pub unsafe extern "C" fn sekp_run(
    problem: *const SekpProblem,
    options: *const SekpRunOptions,
    master_seed: u64,
    out: *mut *mut SekpRunRecord,
) -> i32 {
    guarded(|| {
        if problem.is_null() || options.is_null() || out.is_null() {
            return fail(SekpStatus::NullPointer, "null pointer argument");
        }
        let p = unsafe { &*problem };
        let o = unsafe { *options };
        let variant = match o.variant {
            0 => Variant::Iekf,
            1 => Variant::IekfSl,
            other => {
                return fail(SekpStatus::InvalidArgument, format!("unknown variant {other}"))
            }
        };
        if o.ensemble_size < 2 {
            return fail(SekpStatus::InvalidArgument, "ensemble_size must be at least 2");
        }
        if o.inner_iterations == 0 || !(o.alpha > 0.0) || !(o.r > 0.0) || !(o.theta0 > 0.0)
            || !(o.vartheta > 0.0)
        {
            return fail(
                SekpStatus::InvalidArgument,
                "inner_iterations, alpha, r, theta0, vartheta must be positive",
            );
        }
        let d = p.inner.input_dim();
        let hp = HyperParams::gengamma(o.r, DVector::repeat(d, o.vartheta));
        let inner = KalmanConfig::new(o.alpha, o.inner_iterations);
        let mut cfg = OuterConfig::new(
            inner,
            hp,
            DVector::repeat(d, o.theta0),
            o.outer_iterations + 1,
            variant,
            o.ensemble_size,
        );
        if o.rel_tol > 0.0 {
            cfg.rel_tol = Some(o.rel_tol);
        }
        match run_outer(&p.inner, &cfg, master_seed) {
            Ok(record) => {
                let diverged = record.diverged.clone();
                let handle = Box::new(SekpRunRecord { inner: record, dimension: d });
                unsafe { *out = Box::into_raw(handle) };
                match diverged {
                    Some(reason) => fail(SekpStatus::Diverged, reason),
                    None => SekpStatus::Ok as i32,
                }
            }
            Err(err) => fail(SekpStatus::RuntimeError, err.to_string()),
        }
    })
}

/// Release a run record. Null is a no-op.
///
/// # Safety
/// `record` must be a pointer from `sekp_run`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_free(record: *mut SekpRunRecord) {
    if !record.is_null() {
        drop(unsafe { Box::from_raw(record) });
    }
}

/// Number of recorded outer iterations (vanilla solve included).
///
/// # Safety
/// `record` must be valid; returns 0 on null.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_iterations(record: *const SekpRunRecord) -> usize {
    if record.is_null() {
        return 0;
    }
    unsafe { &*record }.inner.iterations.len()
}

/// State dimension of the recorded estimates.
///
/// # Safety
/// `record` must be valid; returns 0 on null.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_dimension(record: *const SekpRunRecord) -> usize {
    if record.is_null() {
        return 0;
    }
    unsafe { &*record }.dimension
}

/// 1 when the run aborted on divergence, else 0.
///
/// # Safety
/// `record` must be valid; returns 0 on null.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_diverged(record: *const SekpRunRecord) -> i32 {
    if record.is_null() {
        return 0;
    }
    unsafe { &*record }.inner.diverged.is_some() as i32
}

unsafe fn copy_row(
    record: *const SekpRunRecord,
    iteration: usize,
    pick: impl Fn(&sparse_ekp::driver::OuterIterationRecord) -> &[f64],
    buffer: *mut f64,
    len: usize,
) -> i32 {
    if record.is_null() || buffer.is_null() {
        return fail(SekpStatus::NullPointer, "null pointer argument");
    }
    let r = unsafe { &*record };
    let Some(row) = r.inner.iterations.get(iteration) else {
        return fail(
            SekpStatus::OutOfRange,
            format!("iteration {iteration} out of range ({} recorded)", r.inner.iterations.len()),
        );
    };
    let values = pick(row);
    if len < values.len() {
        return fail(
            SekpStatus::OutOfRange,
            format!("buffer of {len} too small for {} values", values.len()),
        );
    }
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buffer, values.len()) };
    SekpStatus::Ok as i32
}

/// Copy the estimate of one outer iteration into `buffer` (>= dimension).
///
/// # Safety
/// `buffer` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_estimate(
    record: *const SekpRunRecord,
    iteration: usize,
    buffer: *mut f64,
    len: usize,
) -> i32 {
    guarded(|| unsafe { copy_row(record, iteration, |row| &row.estimate, buffer, len) })
}

/// Copy the recorded prior variances theta of one outer iteration.
///
/// # Safety
/// `buffer` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_theta(
    record: *const SekpRunRecord,
    iteration: usize,
    buffer: *mut f64,
    len: usize,
) -> i32 {
    guarded(|| unsafe { copy_row(record, iteration, |row| &row.theta, buffer, len) })
}

/// Copy the credible-interval bounds of one outer iteration.
///
/// # Safety
/// Both buffers must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_interval(
    record: *const SekpRunRecord,
    iteration: usize,
    lower: *mut f64,
    upper: *mut f64,
    len: usize,
) -> i32 {
    guarded(|| {
        let code = unsafe { copy_row(record, iteration, |row| &row.lower, lower, len) };
        if code != SekpStatus::Ok as i32 {
            return code;
        }
        unsafe { copy_row(record, iteration, |row| &row.upper, upper, len) }
    })
}

/// Metrics of one outer iteration; unavailable entries come out as NaN.
///
/// # Safety
/// `metrics` must point to writable memory of the right size.
#[no_mangle]
pub unsafe extern "C" fn sekp_run_metrics(
    record: *const SekpRunRecord,
    iteration: usize,
    metrics: *mut SekpMetrics,
) -> i32 {
    guarded(|| {
        if record.is_null() || metrics.is_null() {
            return fail(SekpStatus::NullPointer, "null pointer argument");
        }
        let r = unsafe { &*record };
        let Some(row) = r.inner.iterations.get(iteration) else {
            return fail(
                SekpStatus::OutOfRange,
                format!(
                    "iteration {iteration} out of range ({} recorded)",
                    r.inner.iterations.len()
                ),
            );
        };
        unsafe {
            *metrics = SekpMetrics {
                l2_error: row.l2_error.unwrap_or(f64::NAN),
                avg_width: row.avg_width,
                off_support_norm: row.off_support_norm.unwrap_or(f64::NAN),
                misfit: row.misfit,
            };
        }
        SekpStatus::Ok as i32
    })
}
