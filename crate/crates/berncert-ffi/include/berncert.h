#ifndef BERNCERT_H
#define BERNCERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of a C API call.
 */
typedef enum BcStatus {
  /**
   * The call succeeded.
   */
  BC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BC_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were structurally valid but semantically rejected.
   */
  BC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A filesystem read or write failed.
   */
  BC_STATUS_IO_FAILURE = 3,
  /**
   * A method constraint was violated (for example d > K).
   */
  BC_STATUS_CONSTRAINT_VIOLATION = 4,
} BcStatus;

/**
 * Opaque classifier handle.
 */
typedef struct BcModel BcModel;

/**
 * Opaque smoother handle.
 */
typedef struct BcSmoother BcSmoother;

/**
 * One certification outcome.
 */
typedef struct BcCertificate {
  /**
   * Argmax of the smoothed logits at the feature anchor.
   */
  uintptr_t prediction;
  /**
   * Certified feature-space radius.
   */
  double radius;
  /**
   * Final boundary residual, one half of the squared norm.
   */
  double residual_norm_sq;
  /**
   * Frozen boundary offset.
   */
  double xi;
  /**
   * Whether the solver met a tolerance; a certificate with this unset
   * is an upper bound of unverified quality.
   */
  bool converged;
} BcCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; never free it.
 */
const char *bc_last_error(void);

/**
 * Library version as a static string; never free it.
 */
const char *bc_version(void);

/**
 * Parses a model from a JSON string into a new handle.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` writable; null pointers are
 * reported as a status, not dereferenced.
 */
enum BcStatus bc_model_from_json(const char *json, struct BcModel **out);

/**
 * Loads a model from a JSON file into a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable; null pointers are
 * reported as a status, not dereferenced.
 */
enum BcStatus bc_model_load_json(const char *path, struct BcModel **out);

/**
 * Serializes a model to JSON. The returned string must be released with
 * [`bc_string_free`].
 *
 * # Safety
 * `model` must be a live handle from this library and `out` writable.
 */
enum BcStatus bc_model_to_json(const struct BcModel *model, char **out);

/**
 * Releases a model handle; null is a no-op.
 *
 * # Safety
 * `model` must come from this library and not have been freed already.
 */
void bc_model_free(struct BcModel *model);

/**
 * Width of the model input; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle from this library, or null.
 */
uintptr_t bc_model_input_dim(const struct BcModel *model);

/**
 * Dimension of the smoothing head's input; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle from this library, or null.
 */
uintptr_t bc_model_feature_dim(const struct BcModel *model);

/**
 * Number of classes; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle from this library, or null.
 */
uintptr_t bc_model_num_classes(const struct BcModel *model);

/**
 * Argmax of the base model's logits at `x` (length `len`).
 *
 * # Safety
 * `model` must be a live handle, `x` must point to `len` readable
 * doubles, and `out_class` must be writable.
 */
enum BcStatus bc_predict(const struct BcModel *model,
                         const double *x,
                         uintptr_t len,
                         uintptr_t *out_class);

/**
 * Builds the degree-`n` Bernstein smoother of the model's head.
 *
 * # Safety
 * `model` must be a live handle from this library and `out` writable.
 */
enum BcStatus bc_smoother_build(const struct BcModel *model, uintptr_t n, struct BcSmoother **out);

/**
 * Writes a smoother to a JSON file.
 *
 * # Safety
 * `smoother` must be a live handle from this library and `path`
 * NUL-terminated.
 */
enum BcStatus bc_smoother_save_json(const struct BcSmoother *smoother, const char *path);

/**
 * Loads a smoother from a JSON file into a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable; null pointers are
 * reported as a status, not dereferenced.
 */
enum BcStatus bc_smoother_load_json(const char *path, struct BcSmoother **out);

/**
 * Releases a smoother handle; null is a no-op.
 *
 * # Safety
 * `smoother` must come from this library and not have been freed
 * already.
 */
void bc_smoother_free(struct BcSmoother *smoother);

/**
 * Argmax of the smoothed logits at the feature anchor of input `x`.
 *
 * # Safety
 * `model` and `smoother` must be live handles, `x` must point to `len`
 * readable doubles, and `out_class` must be writable.
 */
enum BcStatus bc_predict_smoothed(const struct BcModel *model,
                                  const struct BcSmoother *smoother,
                                  const double *x,
                                  uintptr_t len,
                                  uintptr_t *out_class);

/**
 * Certifies one input under the p-norm with boundary sharpness `c`
 * (pass INFINITY for the exact boundary), using the default solver.
 *
 * # Safety
 * `model` and `smoother` must be live handles, `x` must point to `len`
 * readable doubles, and `out` must be writable.
 */
enum BcStatus bc_certify(const struct BcModel *model,
                         const struct BcSmoother *smoother,
                         const double *x,
                         uintptr_t len,
                         double p,
                         double c,
                         struct BcCertificate *out);

/**
 * Releases a string returned by this library; null is a no-op.
 *
 * # Safety
 * `s` must come from [`bc_model_to_json`] and not have been freed
 * already.
 */
void bc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BERNCERT_H */
