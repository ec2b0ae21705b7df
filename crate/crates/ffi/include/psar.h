#ifndef PSAR_H
#define PSAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PsarStatus {
  PSAR_STATUS_OK = 0,
  PSAR_STATUS_NULL_POINTER = 1,
  /**
   * Bad dimensions, ids, variances or options.
   */
  PSAR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A node has no out-edges, so its weight row is undefined.
   */
  PSAR_STATUS_ZERO_OUT_DEGREE = 3,
  /**
   * Singular or indefinite system during estimation.
   */
  PSAR_STATUS_NUMERICAL = 4,
  PSAR_STATUS_NOT_CONVERGED = 5,
  /**
   * Caught panic or other unexpected failure.
   */
  PSAR_STATUS_INTERNAL = 6,
} PsarStatus;

typedef enum PsarEstimator {
  PSAR_ESTIMATOR_QMLE = 0,
  PSAR_ESTIMATOR_CLE = 1,
  PSAR_ESTIMATOR_CLS = 2,
} PsarEstimator;

/**
 * Observed data set: noisy response, noisy covariates and the network.
 */
typedef struct PsarData PsarData;

/**
 * A fitted model.
 */
typedef struct PsarFit PsarFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next `psar_*` call on the same thread.
 */
const char *psar_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *psar_version(void);

/**
 * Build a data set.
 *
 * - `y`: `n` noisy responses.
 * - `x`: `n * p` noisy covariates, row-major. The last `p2` columns carry
 *   privacy noise of variance `lambda2_x`.
 * - `src`, `dst`: `n_edges` directed edges as 0-based row indices. Every
 *   node needs at least one out-edge.
 * - `noise_law`: 0 normal, 1 scaled t(6). Only the bootstrap uses it.
 *
 * On success `*out` owns a new handle.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum PsarStatus psar_data_new(size_t n,
                              size_t p,
                              const double *y,
                              const double *x,
                              size_t n_edges,
                              const size_t *src,
                              const size_t *dst,
                              double lambda2,
                              double lambda2_x,
                              size_t p2,
                              uint32_t noise_law,
                              struct PsarData **out);

/**
 * Free a data handle. Null is ignored.
 *
 * # Safety
 * `data` must come from [`psar_data_new`] and not be freed twice.
 */
void psar_data_free(struct PsarData *data);

/**
 * Fit `estimator` (a `PsarEstimator` value) to `data`. With `bootstrap_b >= 2`, standard errors
 * come from a one-step parametric bootstrap seeded by `seed`; 0 skips
 * them. A fit that stops at the iteration cap returns
 * `PSAR_STATUS_NOT_CONVERGED` and no handle.
 *
 * # Safety
 * `data` must be a live handle; `out` must be writable.
 */
enum PsarStatus psar_fit(const struct PsarData *data,
                         uint32_t estimator,
                         size_t bootstrap_b,
                         uint64_t seed,
                         struct PsarFit **out);

/**
 * Free a fit handle. Null is ignored.
 *
 * # Safety
 * `fit` must come from [`psar_fit`] and not be freed twice.
 */
void psar_fit_free(struct PsarFit *fit);

/**
 * Length of the parameter vector `(rho, beta_1..beta_p, sigma2)`, or 0
 * for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t psar_fit_n_params(const struct PsarFit *fit);

/**
 * Iterations used by the fit, or 0 for a null handle.
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
size_t psar_fit_iterations(const struct PsarFit *fit);

/**
 * Copy the estimates `(rho, beta..., sigma2)` into `out[0..len]`.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable for `len` values.
 */
enum PsarStatus psar_fit_params(const struct PsarFit *fit, double *out, size_t len);

/**
 * Copy the bootstrap standard errors. Fails with
 * `PSAR_STATUS_INVALID_ARGUMENT` if the fit was made without bootstrap.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable for `len` values.
 */
enum PsarStatus psar_fit_se(const struct PsarFit *fit, double *out, size_t len);

/**
 * Full fit as a JSON string, or null on failure. Release it with
 * [`psar_string_free`].
 *
 * # Safety
 * `fit` must be null or a live handle.
 */
char *psar_fit_to_json(const struct PsarFit *fit);

/**
 * Free a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from [`psar_fit_to_json`] and not be freed twice.
 */
void psar_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSAR_H */
