#ifndef MFEQ_H
#define MFEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfeqStatus {
  MFEQ_STATUS_OK = 0,
  MFEQ_STATUS_NULL_POINTER = 1,
  MFEQ_STATUS_INVALID_UTF8 = 2,
  MFEQ_STATUS_INVALID_PROBLEM = 3,
  MFEQ_STATUS_SOLVER_FAILURE = 4,
  MFEQ_STATUS_NOT_CHECKABLE = 5,
  MFEQ_STATUS_OUT_OF_RANGE = 6,
  MFEQ_STATUS_BUFFER_TOO_SMALL = 7,
  MFEQ_STATUS_IO = 8,
  MFEQ_STATUS_PANIC = 9,
} MfeqStatus;

/**
 * A validated problem.
 */
typedef struct MfeqProblem MfeqProblem;

/**
 * A solved equilibrium together with the problem it solves.
 */
typedef struct MfeqSolution MfeqSolution;

typedef struct MfeqCertificate {
  double first_order_residual;
  double second_order_margin;
  size_t range_failures;
  bool passes;
} MfeqCertificate;

typedef struct MfeqCostEstimate {
  double mean;
  double std_error;
  size_t samples;
} MfeqCostEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Owned by the library;
 * valid until the next failing call on the same thread.
 */
const char *mfeq_last_error(void);

const char *mfeq_version(void);

/**
 * Parses and validates a problem document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfeqStatus mfeq_problem_from_json(const char *json, struct MfeqProblem **out);

/**
 * Reads, parses and validates a problem file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfeqStatus mfeq_problem_load(const char *path, struct MfeqProblem **out);

/**
 * The same problem on a grid of `steps` cells.
 *
 * # Safety
 * `problem` must come from this library and `out` must be a valid pointer.
 */
enum MfeqStatus mfeq_problem_regrid(const struct MfeqProblem *problem,
                                    size_t steps,
                                    struct MfeqProblem **out);

/**
 * # Safety
 * `problem` must be a valid handle or NULL; any output pointer may be NULL.
 */
enum MfeqStatus mfeq_problem_dims(const struct MfeqProblem *problem,
                                  size_t *n,
                                  size_t *m,
                                  size_t *steps);

/**
 * # Safety
 * `problem` must be NULL or a handle from this library not yet freed.
 */
void mfeq_problem_free(struct MfeqProblem *problem);

/**
 * Solves the equilibrium system.
 *
 * # Safety
 * `problem` must be a valid handle and `out` a valid pointer.
 */
enum MfeqStatus mfeq_solve(const struct MfeqProblem *problem, struct MfeqSolution **out);

/**
 * # Safety
 * `solution` must be NULL or a handle from this library not yet freed.
 */
void mfeq_solution_free(struct MfeqSolution *solution);

/**
 * Copies Θ* (m×n, row-major) and φ* (m) at grid node `node`.
 *
 * # Safety
 * `theta` must hold `theta_len` doubles and `phi` `phi_len` doubles.
 */
enum MfeqStatus mfeq_solution_gain(const struct MfeqSolution *solution,
                                   size_t node,
                                   double *theta,
                                   size_t theta_len,
                                   double *phi,
                                   size_t phi_len);

/**
 * Deterministic part of the certificate (no Monte Carlo).
 *
 * # Safety
 * `solution` must be a valid handle and `out` a valid pointer.
 */
enum MfeqStatus mfeq_solution_certify(const struct MfeqSolution *solution,
                                      double tol_first_order,
                                      double tol_margin,
                                      struct MfeqCertificate *out);

/**
 * Monte Carlo cost of the closed-loop equilibrium.
 *
 * # Safety
 * `solution` must be a valid handle and `out` a valid pointer.
 */
enum MfeqStatus mfeq_solution_cost(const struct MfeqSolution *solution,
                                   uint64_t seed,
                                   size_t samples,
                                   struct MfeqCostEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFEQ_H */
