#ifndef TICONTROL_H
#define TICONTROL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TicStatus {
  TIC_STATUS_OK = 0,
  TIC_STATUS_NULL_POINTER = 1,
  TIC_STATUS_INVALID_ARGUMENT = 2,
  TIC_STATUS_CONFIG = 3,
  TIC_STATUS_DOMAIN = 4,
  TIC_STATUS_STABILITY = 5,
  TIC_STATUS_EVALUATION = 6,
  TIC_STATUS_IO = 7,
  TIC_STATUS_FORMAT = 8,
  TIC_STATUS_BUFFER_TOO_SMALL = 9,
  TIC_STATUS_PANIC = 10,
} TicStatus;

typedef enum TicVerdict {
  TIC_VERDICT_PASS = 0,
  TIC_VERDICT_FAIL = 1,
  TIC_VERDICT_INCONCLUSIVE = 2,
} TicVerdict;

/**
 * Opaque run configuration.
 */
typedef struct TicConfig TicConfig;

/**
 * Opaque solver output.
 */
typedef struct TicSolution TicSolution;

/**
 * Regulator with `U = [−a, a]`, noise `sigma`, horizon `horizon` and
 * comparison anchor `x0`.
 */
typedef struct TicRegulatorParams {
  double a;
  double sigma;
  double horizon;
  double x0;
} TicRegulatorParams;

/**
 * Exact regulator values under a constant control.
 */
typedef struct TicControlValues {
  double f;
  double g;
  double j;
} TicControlValues;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call on the same thread.
 */
const char *tic_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tic_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void tic_string_free(char *s);

/**
 * Parses a JSON run configuration into `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TicStatus tic_config_from_json(const char *json, struct TicConfig **out);

/**
 * Default regulator run for `params`.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum TicStatus tic_config_regulator(struct TicRegulatorParams params, struct TicConfig **out);

/**
 * Overrides the master seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum TicStatus tic_config_set_seed(struct TicConfig *cfg, uint64_t seed);

/**
 * Canonical JSON form of the config; free with [`tic_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` a writable pointer.
 */
enum TicStatus tic_config_to_json(const struct TicConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle that has not been freed.
 */
void tic_config_free(struct TicConfig *cfg);

/**
 * Runs the assumption checks. `*all_pass` is false when any check fails,
 * including problem data the builder rejects.
 *
 * # Safety
 * `cfg` must be a live handle and `all_pass` a writable pointer.
 */
enum TicStatus tic_validate(const struct TicConfig *cfg, bool *all_pass);

/**
 * Solves the extended system on the configured grid.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a writable pointer.
 */
enum TicStatus tic_solve(const struct TicConfig *cfg, struct TicSolution **out);

/**
 * # Safety
 * `sol` must be NULL or a handle that has not been freed.
 */
void tic_solution_free(struct TicSolution *sol);

/**
 * # Safety
 * `sol` must be a live handle and `converged` a writable pointer.
 */
enum TicStatus tic_solution_converged(const struct TicSolution *sol, bool *converged);

/**
 * Number of time nodes, spatial nodes and control components. Tables are
 * laid out time-major with the last spatial axis fastest.
 *
 * # Safety
 * `sol` must be a live handle; the outputs must be writable.
 */
enum TicStatus tic_solution_shape(const struct TicSolution *sol,
                                  size_t *n_t,
                                  size_t *n_x,
                                  size_t *n_u);

/**
 * Copies the value table `V` (`n_t · n_x` entries) into `buf`.
 *
 * # Safety
 * `sol` must be a live handle and `buf` must hold `len` doubles.
 */
enum TicStatus tic_solution_copy_value(const struct TicSolution *sol, double *buf, size_t len);

/**
 * Copies the control table (`n_t · n_x · n_u` entries) into `buf`.
 *
 * # Safety
 * `sol` must be a live handle and `buf` must hold `len` doubles.
 */
enum TicStatus tic_solution_copy_control(const struct TicSolution *sol, double *buf, size_t len);

/**
 * Interpolated `V(t, x)` with `x` of length `dim`.
 *
 * # Safety
 * `sol` must be a live handle, `x` must hold `dim` doubles and `out` must be
 * writable.
 */
enum TicStatus tic_solution_value_at(const struct TicSolution *sol,
                                     double t,
                                     const double *x,
                                     size_t dim,
                                     double *out);

/**
 * Residual report of `sol`, or of the closed form when `sol` is NULL
 * (regulator configs only). `report_json` may be NULL; otherwise it
 * receives a string to free with [`tic_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle, `sol` NULL or live, `pass` writable and
 * `report_json` NULL or writable.
 */
enum TicStatus tic_residual(const struct TicConfig *cfg,
                            const struct TicSolution *sol,
                            bool *pass,
                            char **report_json);

/**
 * Monte Carlo equilibrium test of the configured base control.
 * `report_json` may be NULL; otherwise it receives a string to free with
 * [`tic_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle, `verdict` writable and `report_json` NULL or
 * writable.
 */
enum TicStatus tic_equilibrium(const struct TicConfig *cfg,
                               enum TicVerdict *verdict,
                               char **report_json);

/**
 * Exact `f(t, x, y)`, `g(t, x)` and `J(t, x)` of the regulator under the
 * constant control `u`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TicStatus tic_regulator_constant_control(struct TicRegulatorParams params,
                                              double u,
                                              double t,
                                              double x,
                                              double y,
                                              struct TicControlValues *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TICONTROL_H */
