#ifndef AUXLIN_H
#define AUXLIN_H

/* Generated by cbindgen from auxlin-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes for every entry point.
typedef enum AuxlinStatus {
  AUXLIN_STATUS_OK = 0,
  // A null pointer was passed where data was required.
  AUXLIN_STATUS_NULL_POINTER = 1,
  // An argument violates a precondition.
  AUXLIN_STATUS_INVALID_INPUT = 2,
  // A matrix that must be full rank is not.
  AUXLIN_STATUS_SINGULAR = 3,
  // Too few samples for the requested operation.
  AUXLIN_STATUS_SAMPLE_SIZE = 4,
  // A covariance eigenvalue fell below the PSD tolerance.
  AUXLIN_STATUS_NOT_PSD = 5,
  // Numerical or experiment failure.
  AUXLIN_STATUS_FAILURE = 6,
  // An internal panic was caught.
  AUXLIN_STATUS_PANIC = 7,
} AuxlinStatus;

// Opaque population handle: covariance, true task vectors, noise levels.
typedef struct AuxlinEnsemble AuxlinEnsemble;

// Bias/variance split of the expected main-task generalization error.
typedef struct AuxlinErrorDecomposition {
  double variance;
  double bias;
  double noise;
  double total;
} AuxlinErrorDecomposition;

// Outcome of the beneficial-transfer test `L * Lambda < R`.
typedef struct AuxlinUtilityVerdict {
  double l;
  double r;
  // `R / L`; +inf when `L <= 0`.
  double lambda_cap;
  bool beneficial_for_given;
} AuxlinUtilityVerdict;

// Optimal-weight summary; per-task proportions are written to a separate
// caller-provided buffer.
typedef struct AuxlinOptimalWeights {
  // Optimal total weight; +inf when unbounded.
  double total;
  // Objective value at the optimal proportions.
  double f_value;
  bool unbounded_weight;
  bool non_unique;
  uint64_t iterations;
  double gradient_map_norm;
} AuxlinOptimalWeights;

// Generalization-bound terms for the width-`q` network.
typedef struct AuxlinGenBound {
  double t1;
  double t2;
  double t3;
  double noise;
  double total;
  // False when the hypotheses (`r > 1`, `N > d + 3`) fail; the terms are
  // NaN in that case.
  bool applicable;
} AuxlinGenBound;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Build an ensemble handle.
//
// `sigma_x`: row-major `d x d` covariance, or NULL for the identity.
// `true_w`: column-major `d x (k+1)` task matrix, auxiliary tasks first,
// main task last. `noise_sigmas`: `k+1` noise levels in the same order.
// On success writes a handle to `out`; release it with
// [`auxlin_ensemble_free`].
//
// # Safety
// Pointers must be valid for the documented lengths, and `out` must be a
// valid location for a pointer.
enum AuxlinStatus auxlin_ensemble_new(size_t d,
                                      size_t k,
                                      const double *sigma_x,
                                      const double *true_w,
                                      const double *noise_sigmas,
                                      struct AuxlinEnsemble **out);

// Release a handle created by [`auxlin_ensemble_new`]. NULL is a no-op.
//
// # Safety
// `ens` must be a pointer previously returned by [`auxlin_ensemble_new`]
// and not freed since.
void auxlin_ensemble_free(struct AuxlinEnsemble *ens);

// Exact expected main-task generalization error at the given weights
// (`lambdas`, length `k`; pass `k = 0` for the main-task-only error).
//
// # Safety
// `ens` must be a live handle; `lambdas` must hold `k` values (may be
// NULL when `k = 0`); `out` must be valid.
enum AuxlinStatus auxlin_closed_form_error(const struct AuxlinEnsemble *ens,
                                           const double *lambdas,
                                           size_t k,
                                           size_t n,
                                           struct AuxlinErrorDecomposition *out);

// Beneficial-transfer verdict at the given weights (total must be > 0).
//
// # Safety
// `ens` must be a live handle; `lambdas` must hold `k` values; `out` must
// be valid.
enum AuxlinStatus auxlin_utility_condition(const struct AuxlinEnsemble *ens,
                                           const double *lambdas,
                                           size_t k,
                                           size_t n,
                                           struct AuxlinUtilityVerdict *out);

// Globally optimal task weights for a known population. Writes `k`
// proportions to `proportions_out` and the summary to `out`.
//
// # Safety
// `ens` must be a live handle; `proportions_out` must hold `k` slots
// (`k` = number of auxiliary tasks of the handle); `out` must be valid.
enum AuxlinStatus auxlin_optimal_weights(const struct AuxlinEnsemble *ens,
                                         size_t n,
                                         double *proportions_out,
                                         struct AuxlinOptimalWeights *out);

// Plug-in optimal task weights from raw data. `x` is row-major `n x d`,
// `y` row-major `n x (k+1)` with the main task last. Writes `k`
// proportions and the summary.
//
// # Safety
// Buffers must be valid for the documented lengths.
enum AuxlinStatus auxlin_estimated_optimal_weights(const double *x,
                                                   const double *y,
                                                   size_t n,
                                                   size_t d,
                                                   size_t k,
                                                   double *proportions_out,
                                                   struct AuxlinOptimalWeights *out);

// Generalization bound for the width-`q` network at hypothesis ratio `r`.
// `constants` optionally overrides `[C1, C2, C3, C4]` (NULL keeps the
// exact defaults).
//
// # Safety
// `ens` must be a live handle; `lambdas` must hold `k` values;
// `constants` is NULL or 4 values; `out` must be valid.
enum AuxlinStatus auxlin_gen_bound(const struct AuxlinEnsemble *ens,
                                   const double *lambdas,
                                   size_t k,
                                   size_t q,
                                   size_t n,
                                   double r,
                                   const double *constants,
                                   struct AuxlinGenBound *out);

// Static description of a status code.
const char *auxlin_status_message(enum AuxlinStatus status);

// Library version as a static nul-terminated string.
const char *auxlin_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUXLIN_H */
