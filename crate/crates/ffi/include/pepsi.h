#ifndef PEPSI_H
#define PEPSI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PEPSI_FAMILY_LINEAR 0

#define PEPSI_FAMILY_LOGISTIC 1

#define PEPSI_METHOD_NAIVE 0

#define PEPSI_METHOD_VIS 1

#define PEPSI_METHOD_PSI 2

#define PEPSI_METHOD_AVG 3

#define PEPSI_METHOD_PEPSI 4

/**
 * Result of every call.
 */
typedef enum {
  PEPSI_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  PEPSI_STATUS_NULL_POINTER = 1,
  /**
   * Bad input: dimensions, non-finite values, unknown enum values.
   */
  PEPSI_STATUS_INVALID_INPUT = 2,
  /**
   * A solver failed: no EL solution, singular matrix, non-convergence.
   */
  PEPSI_STATUS_NUMERICAL = 3,
  /**
   * An internal panic was caught at the boundary.
   */
  PEPSI_STATUS_PANIC = 4,
} PepsiStatus;

/**
 * A fitted primary model with Wald inference.
 */
typedef struct PepsiFit PepsiFit;

/**
 * Primary data, secondary outcomes and tuning options.
 */
typedef struct PepsiProblem PepsiProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pepsi_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pepsi_last_error(void);

/**
 * SCAD penalty value and derivative at `t >= 0`.
 *
 * # Safety
 * `value` and `derivative` must be NULL or valid for one write.
 */
PepsiStatus pepsi_scad(double t, double tau, double a, double *value, double *derivative);

/**
 * Solve the empirical-likelihood dual for an `n x r` row-major score matrix.
 * Writes the multiplier (`r` values), the weights (`n` values) and the log
 * likelihood ratio; any output pointer may be NULL.
 *
 * # Safety
 * `scores` must point to `n * r` doubles; `lambda` to at least `r` and
 * `weights` to at least `n` writable doubles when not NULL.
 */
PepsiStatus pepsi_el_solve(const double *scores,
                           size_t n,
                           size_t r,
                           double *lambda,
                           double *weights,
                           double *log_ratio);

/**
 * Create a problem from the primary outcome `y` (`n` values) and the
 * covariates `x` (`n x p`, row-major). The primary model has an intercept.
 *
 * # Safety
 * `y` must point to `n` and `x` to `n * p` doubles; `out` must be writable.
 */
PepsiStatus pepsi_problem_new(const double *y,
                              const double *x,
                              size_t n,
                              size_t p,
                              int family_code,
                              PepsiProblem **out);

/**
 * Release a problem. NULL is ignored.
 *
 * # Safety
 * `problem` must come from [`pepsi_problem_new`] and not be used afterwards.
 */
void pepsi_problem_free(PepsiProblem *problem);

/**
 * Add a secondary outcome observed on the same rows and covariates.
 * `intercept` selects whether its working model has an intercept.
 *
 * # Safety
 * `problem` must be a live handle and `y` must point to `n` doubles.
 */
PepsiStatus pepsi_problem_add_secondary(PepsiProblem *problem,
                                        const double *y,
                                        int family_code,
                                        bool intercept);

/**
 * Coefficients of the first secondary model known to be zero, used by the
 * VIS method. Indices count the intercept (when present) as 0.
 *
 * # Safety
 * `problem` must be a live handle and `zeros` must point to `len` values.
 */
PepsiStatus pepsi_problem_set_vis_zeros(PepsiProblem *problem, const size_t *zeros, size_t len);

/**
 * Replace the default SCAD tuning grid. `len == 0` restores the default.
 *
 * # Safety
 * `problem` must be a live handle and `grid` must point to `len` doubles.
 */
PepsiStatus pepsi_problem_set_tau_grid(PepsiProblem *problem, const double *grid, size_t len);

/**
 * Fit the primary model with one of the `PEPSI_METHOD_*` estimators and
 * compute Wald intervals at `level` (e.g. 0.95).
 *
 * # Safety
 * `problem` must be a live handle; `out` must be writable.
 */
PepsiStatus pepsi_fit(const PepsiProblem *problem, int method, double level, PepsiFit **out);

/**
 * Release a fit. NULL is ignored.
 *
 * # Safety
 * `fit` must come from [`pepsi_fit`] and not be used afterwards.
 */
void pepsi_fit_free(PepsiFit *fit);

/**
 * Number of primary coefficients (intercept first).
 *
 * # Safety
 * `fit` must be a live handle; `dim` must be writable.
 */
PepsiStatus pepsi_fit_dim(const PepsiFit *fit, size_t *dim);

/**
 * Per-coefficient estimate, standard error, interval and p-value. Each output
 * may be NULL; non-NULL outputs must hold `len >= dim` values.
 *
 * # Safety
 * `fit` must be a live handle; outputs must be NULL or valid for `len` writes.
 */
PepsiStatus pepsi_fit_coefficients(const PepsiFit *fit,
                                   double *estimate,
                                   double *se,
                                   double *lower,
                                   double *upper,
                                   double *p_value,
                                   size_t len);

/**
 * Estimated covariance of the coefficients, `dim x dim` row-major.
 *
 * # Safety
 * `fit` must be a live handle; `out` must be valid for `len` writes.
 */
PepsiStatus pepsi_fit_covariance(const PepsiFit *fit, double *out, size_t len);

/**
 * Observation weights used by the primary estimating equation (`n` values).
 *
 * # Safety
 * `fit` must be a live handle; `out` must be valid for `len` writes.
 */
PepsiStatus pepsi_fit_weights(const PepsiFit *fit, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEPSI_H */
