#ifndef MARKOVSDE_H
#define MARKOVSDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum MsdeStatus {
  MSDE_STATUS_OK = 0,
  MSDE_STATUS_NULL_POINTER = 1,
  MSDE_STATUS_INVALID_ARGUMENT = 2,
  MSDE_STATUS_MODEL_ERROR = 3,
  MSDE_STATUS_NUMERICAL_ERROR = 4,
  MSDE_STATUS_BUFFER_TOO_SMALL = 5,
  MSDE_STATUS_PANIC = 6,
} MsdeStatus;

/**
 * Opaque model handle.
 */
typedef struct MsdeModel MsdeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * call on the same thread; never null.
 */
const char *msde_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *msde_version(void);

/**
 * Builds a catalog model. `params_json` may be null or a JSON object of
 * parameter overrides (numbers or expression strings).
 *
 * # Safety
 * `name` and `params_json` must be null or NUL-terminated strings; `out`
 * must be writable.
 */
enum MsdeStatus msde_model_from_catalog(const char *name,
                                        const char *params_json,
                                        struct MsdeModel **out);

/**
 * Builds a model from a JSON model section: either
 * `{"catalog": name, "params": {...}}` or
 * `{"label": .., "drift": [..], "coupling": [[..]], "params": {...}}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MsdeStatus msde_model_from_json(const char *json, struct MsdeModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void msde_model_free(struct MsdeModel *model);

/**
 * State dimension n, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msde_model_dim(const struct MsdeModel *model);

/**
 * Noise dimension m, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msde_model_noise_dim(const struct MsdeModel *model);

/**
 * Drift a(x) into `out[0..n]`.
 *
 * # Safety
 * `x` must hold `n` values and `out` `out_len` values.
 */
enum MsdeStatus msde_drift(const struct MsdeModel *model,
                           const double *x,
                           size_t n,
                           double *out,
                           size_t out_len);

/**
 * Diffusion D = B B^T at x into `out[0..n*n]`, row-major.
 *
 * # Safety
 * `x` must hold `n` values and `out` `out_len` values.
 */
enum MsdeStatus msde_diffusion(const struct MsdeModel *model,
                               const double *x,
                               size_t n,
                               double *out,
                               size_t out_len);

/**
 * Spurious drift (half the divergence of D) into `out[0..n]`.
 *
 * # Safety
 * `x` must hold `n` values and `out` `out_len` values.
 */
enum MsdeStatus msde_spurious_drift(const struct MsdeModel *model,
                                    const double *x,
                                    size_t n,
                                    double *out,
                                    size_t out_len);

/**
 * One Q-increment step from x with Wiener increment `dw[0..m]`.
 *
 * # Safety
 * `x` holds `n` values, `dw` holds `m_noise`, `out` holds `out_len`.
 */
enum MsdeStatus msde_step_q(const struct MsdeModel *model,
                            const double *x,
                            size_t n,
                            double dt,
                            const double *dw,
                            size_t m_noise,
                            double *out,
                            size_t out_len);

/**
 * One α-Euler step; α = 0, 1/2, 1 give Ito, Stratonovich, anti-Ito.
 *
 * # Safety
 * `x` holds `n` values, `dw` holds `m_noise`, `out` holds `out_len`.
 */
enum MsdeStatus msde_step_alpha(const struct MsdeModel *model,
                                const double *x,
                                size_t n,
                                double dt,
                                const double *dw,
                                size_t m_noise,
                                double alpha,
                                double *out,
                                size_t out_len);

/**
 * Simulates `n_paths` paths and writes the final states of completed paths
 * row-major into `out`; `*written` receives the number of completed paths.
 * `scheme` is "q", "ito", "stratonovich", "anti-ito" or "alpha=<a>".
 *
 * # Safety
 * `x0` holds `n` values, `out` holds `out_len`, `written` is writable.
 */
enum MsdeStatus msde_ensemble_final(const struct MsdeModel *model,
                                    const char *scheme,
                                    const double *x0,
                                    size_t n,
                                    double t_final,
                                    size_t m_steps,
                                    size_t n_paths,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len,
                                    size_t *written);

/**
 * Steady density of a 1-D model on `n_cells` cells of [x_min, x_max]:
 * cell centers into `out_x`, density into `out_w`.
 *
 * # Safety
 * `out_x` and `out_w` each hold `out_len` values.
 */
enum MsdeStatus msde_steady_1d(const struct MsdeModel *model,
                               double x_min,
                               double x_max,
                               size_t n_cells,
                               double alpha,
                               double *out_x,
                               double *out_w,
                               size_t out_len);

/**
 * Fixed point near `x_guess` and the quadratic quasipotential there:
 * x* into `out_x_star[0..n]`, S (Hessian of the quasipotential) and the
 * antisymmetric A into `out_s` and `out_a` (n*n each, row-major), both from
 * the Lyapunov route. Fails for non-attracting fixed points.
 *
 * # Safety
 * `x_guess` holds `n` values; `out_x_star` holds `n`, `out_s` and `out_a`
 * hold `n*n`. `out_a` may be null.
 */
enum MsdeStatus msde_analyze(const struct MsdeModel *model,
                             const double *x_guess,
                             size_t n,
                             double *out_x_star,
                             double *out_s,
                             double *out_a);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARKOVSDE_H */
