#ifndef CRUNET_H
#define CRUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CrunetStatus {
  CRUNET_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CRUNET_STATUS_NULL_ARGUMENT = 1,
  /**
   * Inputs were rejected (bad file, shape, option value, non-UTF-8 path).
   */
  CRUNET_STATUS_VALIDATION = 2,
  /**
   * The operation failed while running.
   */
  CRUNET_STATUS_RUNTIME = 3,
  /**
   * A panic was caught at the boundary.
   */
  CRUNET_STATUS_PANIC = 4,
} CrunetStatus;

/**
 * A loaded or simulated acquisition.
 */
typedef struct CrunetCase CrunetCase;

/**
 * A magnitude image sequence `[T, H, W]` in row-major float32.
 */
typedef struct CrunetImage CrunetImage;

/**
 * A trained reconstruction model.
 */
typedef struct CrunetModel CrunetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *crunet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *crunet_version(void);

/**
 * Loads a case directory written by `crunet simulate`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum CrunetStatus crunet_case_load(const char *dir, struct CrunetCase **out);

/**
 * Generates a noiseless synthetic cine case. `trajectory` is 0 (uniform),
 * 1 (gaussian) or 2 (pseudo-radial); `accel` is 8, 16 or 24.
 *
 * # Safety
 * `out` must be writable.
 */
enum CrunetStatus crunet_case_simulate(uint32_t trajectory,
                                       uint32_t accel,
                                       size_t frames,
                                       size_t coils,
                                       size_t height,
                                       size_t width,
                                       uint64_t seed,
                                       struct CrunetCase **out);

/**
 * Writes `(T, C, H, W)` of a case. Any output pointer may be null.
 *
 * # Safety
 * `case` must come from this library and not have been freed.
 */
enum CrunetStatus crunet_case_dims(const struct CrunetCase *case_,
                                   size_t *frames,
                                   size_t *coils,
                                   size_t *height,
                                   size_t *width);

/**
 * # Safety
 * `case` must be null or a handle from this library, freed at most once.
 */
void crunet_case_free(struct CrunetCase *case_);

/**
 * Loads a model checkpoint (`.safetensors` written by training).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CrunetStatus crunet_model_load(const char *path, struct CrunetModel **out);

/**
 * Number of cascades of a loaded model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
size_t crunet_model_num_cascades(const struct CrunetModel *model);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void crunet_model_free(struct CrunetModel *model);

/**
 * Reconstructs every frame of `case` with sliding-window inference.
 *
 * # Safety
 * `model` and `case` must be live handles; `out` must be writable.
 */
enum CrunetStatus crunet_reconstruct(const struct CrunetModel *model,
                                     const struct CrunetCase *case_,
                                     struct CrunetImage **out);

/**
 * Root-sum-of-squares image of the zero-filled measurements.
 *
 * # Safety
 * `case` must be a live handle; `out` must be writable.
 */
enum CrunetStatus crunet_zero_filled(const struct CrunetCase *case_, struct CrunetImage **out);

/**
 * Writes `(T, H, W)` of an image. Any output pointer may be null.
 *
 * # Safety
 * `image` must be a live handle.
 */
enum CrunetStatus crunet_image_dims(const struct CrunetImage *image,
                                    size_t *frames,
                                    size_t *height,
                                    size_t *width);

/**
 * Pointer to the `T·H·W` row-major pixels, valid while the handle lives.
 * Null for a null handle.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
const float *crunet_image_data(const struct CrunetImage *image);

/**
 * # Safety
 * `image` must be null or a handle from this library, freed at most once.
 */
void crunet_image_free(struct CrunetImage *image);

/**
 * Scores `image` against the case's reference on the central
 * `crop_fraction` of each axis.
 *
 * # Safety
 * `image` and `case` must be live handles; outputs must be writable.
 */
enum CrunetStatus crunet_evaluate(const struct CrunetImage *image,
                                  const struct CrunetCase *case_,
                                  double crop_fraction,
                                  double *psnr,
                                  double *ssim,
                                  double *nmse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRUNET_H */
