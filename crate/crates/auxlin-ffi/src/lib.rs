//! C ABI for the auxlin library.
//!
//! Conventions: every function returns an [`AuxlinStatus`] code; results
//! come back through out-pointers; `AuxlinEnsemble` is an opaque handle
//! created by [`auxlin_ensemble_new`] and released by
//! [`auxlin_ensemble_free`]. Matrices cross the boundary as dense `f64`
//! buffers ordered as documented per argument. All functions catch panics
//! and map them to [`AuxlinStatus::Panic`].
//!
//! The matching header is generated into `include/auxlin.h` at build time.

use std::panic::{catch_unwind, AssertUnwindSafe};

use auxlin::linear_net::{gen_bound, MomentConstants, Provenance};
use auxlin::regression::{
    estimated_optimal_weights, optimal_weights, utility_condition, OptimalWeights, WeightConfig,
};
use auxlin::taskgen::{Dataset, TaskEnsemble};
use auxlin::Error;
use nalgebra::DMatrix;

/// Result codes for every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxlinStatus {
    Ok = 0,
    /// A null pointer was passed where data was required.
    NullPointer = 1,
    /// An argument violates a precondition.
    InvalidInput = 2,
    /// A matrix that must be full rank is not.
    Singular = 3,
    /// Too few samples for the requested operation.
    SampleSize = 4,
    /// A covariance eigenvalue fell below the PSD tolerance.
    NotPsd = 5,
    /// Numerical or experiment failure.
    Failure = 6,
    /// An internal panic was caught.
    Panic = 7,
}

impl From<&Error> for AuxlinStatus {
    fn from(err: &Error) -> Self {
        match err {
            Error::InvalidInput(_) | Error::Config(_) | Error::RankOutOfRange { .. } => {
                AuxlinStatus::InvalidInput
            }
            Error::Singular(_) => AuxlinStatus::Singular,
            Error::SampleSize { .. } => AuxlinStatus::SampleSize,
            Error::NotPsd(_) => AuxlinStatus::NotPsd,
            _ => AuxlinStatus::Failure,
        }
    }
}

/// Opaque population handle: covariance, true task vectors, noise levels.
pub struct AuxlinEnsemble {
    inner: TaskEnsemble,
}

/// Bias/variance split of the expected main-task generalization error.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AuxlinErrorDecomposition {
    pub variance: f64,
    pub bias: f64,
    pub noise: f64,
    pub total: f64,
}

/// Outcome of the beneficial-transfer test `L * Lambda < R`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AuxlinUtilityVerdict {
    pub l: f64,
    pub r: f64,
    /// `R / L`; +inf when `L <= 0`.
    pub lambda_cap: f64,
    pub beneficial_for_given: bool,
}

/// Optimal-weight summary; per-task proportions are written to a separate
/// caller-provided buffer.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AuxlinOptimalWeights {
    /// Optimal total weight; +inf when unbounded.
    pub total: f64,
    /// Objective value at the optimal proportions.
    pub f_value: f64,
    pub unbounded_weight: bool,
    pub non_unique: bool,
    pub iterations: u64,
    pub gradient_map_norm: f64,
}

/// Generalization-bound terms for the width-`q` network.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AuxlinGenBound {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub noise: f64,
    pub total: f64,
    /// False when the hypotheses (`r > 1`, `N > d + 3`) fail; the terms are
    /// NaN in that case.
    pub applicable: bool,
}

fn guard(status: impl FnOnce() -> AuxlinStatus) -> AuxlinStatus {
    match catch_unwind(AssertUnwindSafe(status)) {
        Ok(code) => code,
        Err(_) => AuxlinStatus::Panic,
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Build an ensemble handle.
///
/// `sigma_x`: row-major `d x d` covariance, or NULL for the identity.
/// `true_w`: column-major `d x (k+1)` task matrix, auxiliary tasks first,
/// main task last. `noise_sigmas`: `k+1` noise levels in the same order.
/// On success writes a handle to `out`; release it with
/// [`auxlin_ensemble_free`].
///
/// # Safety
/// Pointers must be valid for the documented lengths, and `out` must be a
/// valid location for a pointer.
#[no_mangle]
pub unsafe extern "C" fn auxlin_ensemble_new(
    d: usize,
    k: usize,
    sigma_x: *const f64,
    true_w: *const f64,
    noise_sigmas: *const f64,
    out: *mut *mut AuxlinEnsemble,
) -> AuxlinStatus {
    if out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let (Some(w), Some(sigmas)) = (slice(true_w, d * (k + 1)), slice(noise_sigmas, k + 1)) else {
        return AuxlinStatus::NullPointer;
    };
    let cov = if sigma_x.is_null() {
        DMatrix::identity(d, d)
    } else {
        let raw = std::slice::from_raw_parts(sigma_x, d * d);
        DMatrix::from_fn(d, d, |i, j| raw[i * d + j])
    };
    guard(|| {
        let tasks = DMatrix::from_column_slice(d, k + 1, w);
        match TaskEnsemble::new(cov, tasks, sigmas.to_vec()) {
            Ok(ens) => {
                *out = Box::into_raw(Box::new(AuxlinEnsemble { inner: ens }));
                AuxlinStatus::Ok
            }
            Err(e) => (&e).into(),
        }
    })
}

/// Release a handle created by [`auxlin_ensemble_new`]. NULL is a no-op.
///
/// # Safety
/// `ens` must be a pointer previously returned by [`auxlin_ensemble_new`]
/// and not freed since.
#[no_mangle]
pub unsafe extern "C" fn auxlin_ensemble_free(ens: *mut AuxlinEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

unsafe fn weights_from(ptr: *const f64, k: usize) -> Result<WeightConfig, AuxlinStatus> {
    let Some(lambdas) = slice(ptr, k) else {
        return Err(AuxlinStatus::NullPointer);
    };
    WeightConfig::new(lambdas.to_vec()).map_err(|e| (&e).into())
}

/// Exact expected main-task generalization error at the given weights
/// (`lambdas`, length `k`; pass `k = 0` for the main-task-only error).
///
/// # Safety
/// `ens` must be a live handle; `lambdas` must hold `k` values (may be
/// NULL when `k = 0`); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn auxlin_closed_form_error(
    ens: *const AuxlinEnsemble,
    lambdas: *const f64,
    k: usize,
    n: usize,
    out: *mut AuxlinErrorDecomposition,
) -> AuxlinStatus {
    if ens.is_null() || out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let ens = &(*ens).inner;
    let w = if k == 0 {
        Ok(WeightConfig::none(ens.num_aux()))
    } else {
        weights_from(lambdas, k)
    };
    let w = match w {
        Ok(w) => w,
        Err(code) => return code,
    };
    guard(|| match auxlin::regression::closed_form_error(ens, &w, n) {
        Ok(e) => {
            *out = AuxlinErrorDecomposition {
                variance: e.variance,
                bias: e.bias,
                noise: e.noise,
                total: e.total,
            };
            AuxlinStatus::Ok
        }
        Err(e) => (&e).into(),
    })
}

/// Beneficial-transfer verdict at the given weights (total must be > 0).
///
/// # Safety
/// `ens` must be a live handle; `lambdas` must hold `k` values; `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn auxlin_utility_condition(
    ens: *const AuxlinEnsemble,
    lambdas: *const f64,
    k: usize,
    n: usize,
    out: *mut AuxlinUtilityVerdict,
) -> AuxlinStatus {
    if ens.is_null() || out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let w = match weights_from(lambdas, k) {
        Ok(w) => w,
        Err(code) => return code,
    };
    let ens = &(*ens).inner;
    guard(|| match utility_condition(ens, &w, n) {
        Ok(v) => {
            *out = AuxlinUtilityVerdict {
                l: v.l,
                r: v.r,
                lambda_cap: v.lambda_cap,
                beneficial_for_given: v.beneficial_for_given,
            };
            AuxlinStatus::Ok
        }
        Err(e) => (&e).into(),
    })
}

fn write_optimal(
    opt: &OptimalWeights,
    proportions_out: *mut f64,
    out: *mut AuxlinOptimalWeights,
) -> AuxlinStatus {
    unsafe {
        let props = std::slice::from_raw_parts_mut(proportions_out, opt.proportions_star.len());
        props.copy_from_slice(&opt.proportions_star);
        *out = AuxlinOptimalWeights {
            total: opt.total_star,
            f_value: opt.f_value,
            unbounded_weight: opt.unbounded_weight,
            non_unique: opt.non_unique,
            iterations: opt.iterations as u64,
            gradient_map_norm: opt.gradient_map_norm,
        };
    }
    AuxlinStatus::Ok
}

/// Globally optimal task weights for a known population. Writes `k`
/// proportions to `proportions_out` and the summary to `out`.
///
/// # Safety
/// `ens` must be a live handle; `proportions_out` must hold `k` slots
/// (`k` = number of auxiliary tasks of the handle); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn auxlin_optimal_weights(
    ens: *const AuxlinEnsemble,
    n: usize,
    proportions_out: *mut f64,
    out: *mut AuxlinOptimalWeights,
) -> AuxlinStatus {
    if ens.is_null() || proportions_out.is_null() || out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let ens = &(*ens).inner;
    guard(|| match optimal_weights(ens, n, &Default::default()) {
        Ok(opt) => write_optimal(&opt, proportions_out, out),
        Err(e) => (&e).into(),
    })
}

/// Plug-in optimal task weights from raw data. `x` is row-major `n x d`,
/// `y` row-major `n x (k+1)` with the main task last. Writes `k`
/// proportions and the summary.
///
/// # Safety
/// Buffers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn auxlin_estimated_optimal_weights(
    x: *const f64,
    y: *const f64,
    n: usize,
    d: usize,
    k: usize,
    proportions_out: *mut f64,
    out: *mut AuxlinOptimalWeights,
) -> AuxlinStatus {
    if proportions_out.is_null() || out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let (Some(xs), Some(ys)) = (slice(x, n * d), slice(y, n * (k + 1))) else {
        return AuxlinStatus::NullPointer;
    };
    guard(|| {
        let xm = DMatrix::from_fn(n, d, |i, j| xs[i * d + j]);
        let ym = DMatrix::from_fn(n, k + 1, |i, j| ys[i * (k + 1) + j]);
        let data = match Dataset::from_parts(xm, ym) {
            Ok(ds) => ds,
            Err(e) => return (&e).into(),
        };
        match estimated_optimal_weights(&data, &Default::default()) {
            Ok(opt) => write_optimal(&opt, proportions_out, out),
            Err(e) => (&e).into(),
        }
    })
}

/// Generalization bound for the width-`q` network at hypothesis ratio `r`.
/// `constants` optionally overrides `[C1, C2, C3, C4]` (NULL keeps the
/// exact defaults).
///
/// # Safety
/// `ens` must be a live handle; `lambdas` must hold `k` values;
/// `constants` is NULL or 4 values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn auxlin_gen_bound(
    ens: *const AuxlinEnsemble,
    lambdas: *const f64,
    k: usize,
    q: usize,
    n: usize,
    r: f64,
    constants: *const f64,
    out: *mut AuxlinGenBound,
) -> AuxlinStatus {
    if ens.is_null() || out.is_null() {
        return AuxlinStatus::NullPointer;
    }
    let w = match weights_from(lambdas, k) {
        Ok(w) => w,
        Err(code) => return code,
    };
    let overrides = slice(constants, 4).map(|c| MomentConstants {
        c1: c[0],
        c2: c[1],
        c3: c[2],
        c4: c[3],
        provenance: Provenance::Override,
    });
    let ens = &(*ens).inner;
    guard(|| match gen_bound(ens, &w, q, n, r, overrides) {
        Ok(b) => {
            *out = AuxlinGenBound {
                t1: b.t1,
                t2: b.t2,
                t3: b.t3,
                noise: b.noise,
                total: b.total,
                applicable: b.applicable,
            };
            AuxlinStatus::Ok
        }
        Err(e) => (&e).into(),
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn auxlin_status_message(status: AuxlinStatus) -> *const libc::c_char {
    let msg: &'static [u8] = match status {
        AuxlinStatus::Ok => b"ok\0",
        AuxlinStatus::NullPointer => b"null pointer argument\0",
        AuxlinStatus::InvalidInput => b"invalid input\0",
        AuxlinStatus::Singular => b"singular or rank-deficient matrix\0",
        AuxlinStatus::SampleSize => b"sample size too small\0",
        AuxlinStatus::NotPsd => b"covariance not positive semidefinite\0",
        AuxlinStatus::Failure => b"numerical or experiment failure\0",
        AuxlinStatus::Panic => b"internal panic\0",
    };
    msg.as_ptr() as *const libc::c_char
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn auxlin_version() -> *const libc::c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const libc::c_char
}
