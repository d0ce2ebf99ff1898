#ifndef COFUSE_H
#define COFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `COFUSE_STATUS_CONFIG` and `COFUSE_STATUS_DIVERGENCE`
 * share their values with the CLI exit codes.
 */
typedef enum CofuseStatus {
  COFUSE_STATUS_OK = 0,
  COFUSE_STATUS_ERROR = 1,
  COFUSE_STATUS_CONFIG = 2,
  COFUSE_STATUS_DIVERGENCE = 3,
  COFUSE_STATUS_NULL_POINTER = 4,
  COFUSE_STATUS_INVALID_ARGUMENT = 5,
  COFUSE_STATUS_IO = 6,
  COFUSE_STATUS_PANIC = 7,
} CofuseStatus;

/**
 * A pipeline model together with the configuration it was built from.
 */
typedef struct CofuseModel CofuseModel;

/**
 * Aggregate scores of one evaluation.
 */
typedef struct CofuseMetrics {
  double iou;
  double mse_to_clean;
  size_t ticks;
} CofuseMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cofuse_last_error(void);

/**
 * Creates an untrained model. `config_json` may be null for defaults.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be
 * a valid pointer to writable storage.
 */
enum CofuseStatus cofuse_model_new(const char *config_json,
                                   uint64_t seed,
                                   struct CofuseModel **out);

/**
 * Trains a model from the configuration's training seed and stores the
 * per-step losses in `losses` (capacity `losses_len`; may be null).
 *
 * # Safety
 * Pointer arguments must be null (where allowed) or valid; `losses` must
 * hold `losses_len` doubles.
 */
enum CofuseStatus cofuse_train(const char *config_json,
                               struct CofuseModel **out,
                               double *losses,
                               size_t losses_len);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void cofuse_model_free(struct CofuseModel *model);

/**
 * Number of scalar parameters in the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cofuse_model_num_values(const struct CofuseModel *model);

/**
 * Scores the model on its configuration's evaluation scenarios.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for writes.
 */
enum CofuseStatus cofuse_evaluate(const struct CofuseModel *model, struct CofuseMetrics *out);

/**
 * Writes the parameters in the binary parameter format.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CofuseStatus cofuse_model_save(const struct CofuseModel *model, const char *path);

/**
 * Replaces the parameter values with those stored at `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CofuseStatus cofuse_model_load(struct CofuseModel *model, const char *path);

/**
 * One-level Haar analysis of a `c×h×w` array into the packed
 * `4c×(h/2)×(w/2)` layout (LL, LH, HL, HH blocks of `c` channels).
 *
 * # Safety
 * `input` and `out` must each hold `c*h*w` doubles.
 */
enum CofuseStatus cofuse_haar_forward(const double *input,
                                      size_t c,
                                      size_t h,
                                      size_t w,
                                      double *out);

/**
 * Inverse of `cofuse_haar_forward`; `c`, `h`, `w` describe the output.
 *
 * # Safety
 * `input` and `out` must each hold `c*h*w` doubles.
 */
enum CofuseStatus cofuse_haar_inverse(const double *input,
                                      size_t c,
                                      size_t h,
                                      size_t w,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COFUSE_H */
