//! C ABI for the pepsi estimators.
//!
//! Conventions:
//! - every function returns a [`PepsiStatus`]; details of the last failure on
//!   the calling thread are available from [`pepsi_last_error`];
//! - matrices are dense, row-major (`x[i * p + k]` is covariate `k` of row `i`);
//! - handles are created by `*_new`/`pepsi_fit` and released by the matching
//!   `*_free`; freeing NULL is a no-op;
//! - output arrays are caller-allocated and their lengths are checked.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use pepsi::{
    apply_zero_constraints, averaging_fit, naive_fit, pepsi_fit as pepsi_integrate, psi_fit,
    vis_fit, wald_inference, ElOptions, Family, InferenceTable, ModelSpec, PenaltyConfig,
    PepsiError, PrimaryDataset, PrimaryFit, SecondaryDataset,
};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepsiStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Bad input: dimensions, non-finite values, unknown enum values.
    InvalidInput = 2,
    /// A solver failed: no EL solution, singular matrix, non-convergence.
    Numerical = 3,
    /// An internal panic was caught at the boundary.
    Panic = 4,
}

pub const PEPSI_FAMILY_LINEAR: c_int = 0;
pub const PEPSI_FAMILY_LOGISTIC: c_int = 1;

pub const PEPSI_METHOD_NAIVE: c_int = 0;
pub const PEPSI_METHOD_VIS: c_int = 1;
pub const PEPSI_METHOD_PSI: c_int = 2;
pub const PEPSI_METHOD_AVG: c_int = 3;
pub const PEPSI_METHOD_PEPSI: c_int = 4;

/// Primary data, secondary outcomes and tuning options.
pub struct PepsiProblem {
    primary: PrimaryDataset,
    family: Family,
    secondaries: Vec<SecondaryDataset>,
    secondary_specs: Vec<ModelSpec>,
    vis_zeros: Vec<usize>,
    penalty: PenaltyConfig,
}

/// A fitted primary model with Wald inference.
pub struct PepsiFit {
    fit: PrimaryFit,
    table: InferenceTable,
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(PepsiError),
}

impl From<PepsiError> for Failure {
    fn from(e: PepsiError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> PepsiStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PepsiStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            PepsiStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_last_error(msg);
            PepsiStatus::InvalidInput
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            if e.is_numerical() {
                PepsiStatus::Numerical
            } else {
                PepsiStatus::InvalidInput
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            PepsiStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &'static str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(
    ptr: *mut f64,
    len: usize,
    needed: usize,
    what: &'static str,
) -> FfiResult<Option<&'a mut [f64]>> {
    if ptr.is_null() {
        return Ok(None);
    }
    if len < needed {
        return Err(Failure::Invalid(format!(
            "{what}: buffer holds {len} values, {needed} needed"
        )));
    }
    Ok(Some(std::slice::from_raw_parts_mut(ptr, needed)))
}

fn family(code: c_int) -> FfiResult<Family> {
    match code {
        PEPSI_FAMILY_LINEAR => Ok(Family::Linear),
        PEPSI_FAMILY_LOGISTIC => Ok(Family::Logistic),
        other => Err(Failure::Invalid(format!("unknown family code {other}"))),
    }
}

fn product(a: usize, b: usize) -> FfiResult<usize> {
    a.checked_mul(b)
        .ok_or_else(|| Failure::Invalid("matrix size overflows".into()))
}

unsafe fn problem_ref<'a>(p: *const PepsiProblem) -> FfiResult<&'a PepsiProblem> {
    p.as_ref().ok_or(Failure::Null("problem"))
}

unsafe fn fit_ref<'a>(f: *const PepsiFit) -> FfiResult<&'a PepsiFit> {
    f.as_ref().ok_or(Failure::Null("fit"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pepsi_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pepsi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

/// SCAD penalty value and derivative at `t >= 0`.
///
/// # Safety
/// `value` and `derivative` must be NULL or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn pepsi_scad(
    t: f64,
    tau: f64,
    a: f64,
    value: *mut f64,
    derivative: *mut f64,
) -> PepsiStatus {
    guard(|| {
        let (v, d) = pepsi::scad(t, tau, a)?;
        if let Some(out) = value.as_mut() {
            *out = v;
        }
        if let Some(out) = derivative.as_mut() {
            *out = d;
        }
        Ok(())
    })
}

/// Solve the empirical-likelihood dual for an `n x r` row-major score matrix.
/// Writes the multiplier (`r` values), the weights (`n` values) and the log
/// likelihood ratio; any output pointer may be NULL.
///
/// # Safety
/// `scores` must point to `n * r` doubles; `lambda` to at least `r` and
/// `weights` to at least `n` writable doubles when not NULL.
#[no_mangle]
pub unsafe extern "C" fn pepsi_el_solve(
    scores: *const f64,
    n: usize,
    r: usize,
    lambda: *mut f64,
    weights: *mut f64,
    log_ratio: *mut f64,
) -> PepsiStatus {
    guard(|| {
        if n == 0 || r == 0 {
            return Err(Failure::Invalid("score matrix must be non-empty".into()));
        }
        let data = slice(scores, product(n, r)?, "scores")?;
        let g = DMatrix::from_row_slice(n, r, data);
        let sol = pepsi::solve_dual(&g, &ElOptions::default())?;
        if let Some(out) = out_slice(lambda, r, r, "lambda")? {
            out.copy_from_slice(sol.lambda.as_slice());
        }
        if let Some(out) = out_slice(weights, n, n, "weights")? {
            out.copy_from_slice(sol.weights.as_slice());
        }
        if let Some(out) = log_ratio.as_mut() {
            *out = sol.log_ratio;
        }
        Ok(())
    })
}

/// Create a problem from the primary outcome `y` (`n` values) and the
/// covariates `x` (`n x p`, row-major). The primary model has an intercept.
///
/// # Safety
/// `y` must point to `n` and `x` to `n * p` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pepsi_problem_new(
    y: *const f64,
    x: *const f64,
    n: usize,
    p: usize,
    family_code: c_int,
    out: *mut *mut PepsiProblem,
) -> PepsiStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = std::ptr::null_mut();
        let family = family(family_code)?;
        if n == 0 || p == 0 {
            return Err(Failure::Invalid(
                "need at least one row and one covariate".into(),
            ));
        }
        let y = DVector::from_column_slice(slice(y, n, "y")?);
        let x = DMatrix::from_row_slice(n, p, slice(x, product(n, p)?, "x")?);
        let primary = PrimaryDataset::new(y, x)?;
        primary.check_family(family)?;
        *out = Box::into_raw(Box::new(PepsiProblem {
            primary,
            family,
            secondaries: Vec::new(),
            secondary_specs: Vec::new(),
            vis_zeros: Vec::new(),
            penalty: PenaltyConfig::default(),
        }));
        Ok(())
    })
}

/// Release a problem. NULL is ignored.
///
/// # Safety
/// `problem` must come from [`pepsi_problem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pepsi_problem_free(problem: *mut PepsiProblem) {
    if !problem.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(problem))));
    }
}

/// Add a secondary outcome observed on the same rows and covariates.
/// `intercept` selects whether its working model has an intercept.
///
/// # Safety
/// `problem` must be a live handle and `y` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pepsi_problem_add_secondary(
    problem: *mut PepsiProblem,
    y: *const f64,
    family_code: c_int,
    intercept: bool,
) -> PepsiStatus {
    guard(|| {
        let prob = problem.as_mut().ok_or(Failure::Null("problem"))?;
        let family = family(family_code)?;
        let n = prob.primary.n();
        let y = DVector::from_column_slice(slice(y, n, "y")?);
        let index = prob.secondaries.len() + 1;
        let s = SecondaryDataset::new(index, y, prob.primary.x().clone())?;
        let spec = ModelSpec::new(family, prob.primary.x().ncols()).with_intercept(intercept);
        prob.secondaries.push(s);
        prob.secondary_specs.push(spec);
        Ok(())
    })
}

/// Coefficients of the first secondary model known to be zero, used by the
/// VIS method. Indices count the intercept (when present) as 0.
///
/// # Safety
/// `problem` must be a live handle and `zeros` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn pepsi_problem_set_vis_zeros(
    problem: *mut PepsiProblem,
    zeros: *const usize,
    len: usize,
) -> PepsiStatus {
    guard(|| {
        let prob = problem.as_mut().ok_or(Failure::Null("problem"))?;
        prob.vis_zeros = if len == 0 {
            Vec::new()
        } else if zeros.is_null() {
            return Err(Failure::Null("zeros"));
        } else {
            std::slice::from_raw_parts(zeros, len).to_vec()
        };
        Ok(())
    })
}

/// Replace the default SCAD tuning grid. `len == 0` restores the default.
///
/// # Safety
/// `problem` must be a live handle and `grid` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pepsi_problem_set_tau_grid(
    problem: *mut PepsiProblem,
    grid: *const f64,
    len: usize,
) -> PepsiStatus {
    guard(|| {
        let prob = problem.as_mut().ok_or(Failure::Null("problem"))?;
        let grid = slice(grid, len, "grid")?;
        let mut cfg = prob.penalty.clone();
        cfg.tau_grid = (!grid.is_empty()).then(|| grid.to_vec());
        cfg.validate()?;
        prob.penalty = cfg;
        Ok(())
    })
}

/// Fit the primary model with one of the `PEPSI_METHOD_*` estimators and
/// compute Wald intervals at `level` (e.g. 0.95).
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit(
    problem: *const PepsiProblem,
    method: c_int,
    level: f64,
    out: *mut *mut PepsiFit,
) -> PepsiStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = std::ptr::null_mut();
        let prob = problem_ref(problem)?;
        let spec = ModelSpec::new(prob.family, prob.primary.x().ncols());
        let first = || {
            prob.secondaries
                .first()
                .zip(prob.secondary_specs.first())
                .ok_or_else(|| Failure::Invalid("this method needs a secondary outcome".into()))
        };
        let fit = match method {
            PEPSI_METHOD_NAIVE => naive_fit(&prob.primary, &spec)?,
            PEPSI_METHOD_PSI => {
                let (s, sspec) = first()?;
                psi_fit(&prob.primary, s, &spec, sspec, &prob.penalty)?
            }
            PEPSI_METHOD_VIS => {
                let (s, sspec) = first()?;
                let constrained = apply_zero_constraints(sspec, &prob.vis_zeros)?;
                vis_fit(&prob.primary, s, &spec, &constrained, &prob.penalty)?
            }
            PEPSI_METHOD_AVG => averaging_fit(
                &prob.primary,
                &prob.secondaries,
                &spec,
                &prob.secondary_specs,
                &prob.penalty,
            )?,
            PEPSI_METHOD_PEPSI => pepsi_integrate(
                &prob.primary,
                &prob.secondaries,
                &spec,
                &prob.secondary_specs,
                &prob.penalty,
            )?,
            other => return Err(Failure::Invalid(format!("unknown method code {other}"))),
        };
        let names = spec.coefficient_names(prob.primary.covariate_names());
        let table = wald_inference(&fit.beta_hat, &fit.covariance, level, None, &names)?;
        *out = Box::into_raw(Box::new(PepsiFit { fit, table }));
        Ok(())
    })
}

/// Release a fit. NULL is ignored.
///
/// # Safety
/// `fit` must come from [`pepsi_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit_free(fit: *mut PepsiFit) {
    if !fit.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(fit))));
    }
}

/// Number of primary coefficients (intercept first).
///
/// # Safety
/// `fit` must be a live handle; `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit_dim(fit: *const PepsiFit, dim: *mut usize) -> PepsiStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        *dim.as_mut().ok_or(Failure::Null("dim"))? = f.fit.beta_hat.len();
        Ok(())
    })
}

/// Per-coefficient estimate, standard error, interval and p-value. Each output
/// may be NULL; non-NULL outputs must hold `len >= dim` values.
///
/// # Safety
/// `fit` must be a live handle; outputs must be NULL or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit_coefficients(
    fit: *const PepsiFit,
    estimate: *mut f64,
    se: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
    p_value: *mut f64,
    len: usize,
) -> PepsiStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let rows = &f.table.rows;
        let p = rows.len();
        let columns: [(
            *mut f64,
            &'static str,
            fn(&pepsi::variance::InferenceRow) -> f64,
        ); 5] = [
            (estimate, "estimate", |r| r.estimate),
            (se, "se", |r| r.se),
            (lower, "lower", |r| r.lower),
            (upper, "upper", |r| r.upper),
            (p_value, "p_value", |r| r.p_value),
        ];
        for (ptr, what, get) in columns {
            if let Some(out) = out_slice(ptr, len, p, what)? {
                for (o, r) in out.iter_mut().zip(rows) {
                    *o = get(r);
                }
            }
        }
        Ok(())
    })
}

/// Estimated covariance of the coefficients, `dim x dim` row-major.
///
/// # Safety
/// `fit` must be a live handle; `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit_covariance(
    fit: *const PepsiFit,
    out: *mut f64,
    len: usize,
) -> PepsiStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let p = f.fit.beta_hat.len();
        let out = out_slice(out, len, p * p, "covariance")?.ok_or(Failure::Null("out"))?;
        for i in 0..p {
            for j in 0..p {
                out[i * p + j] = f.fit.covariance[(i, j)];
            }
        }
        Ok(())
    })
}

/// Observation weights used by the primary estimating equation (`n` values).
///
/// # Safety
/// `fit` must be a live handle; `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pepsi_fit_weights(
    fit: *const PepsiFit,
    out: *mut f64,
    len: usize,
) -> PepsiStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        let w = &f.fit.weights_used.weights;
        let out = out_slice(out, len, w.len(), "weights")?.ok_or(Failure::Null("out"))?;
        out.copy_from_slice(w.as_slice());
        Ok(())
    })
}
