#ifndef SHADOWBENCH_H
#define SHADOWBENCH_H

/* Generated by cbindgen from crates/ffi. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_ARGUMENT = 2,
  SB_STATUS_IO = 3,
  SB_STATUS_FORMAT = 4,
  SB_STATUS_DIMENSION_MISMATCH = 5,
  SB_STATUS_DOMAIN = 6,
  SB_STATUS_ORACLE = 7,
  SB_STATUS_PANIC = 8,
} SbStatus;

/**
 * Single-channel field (mask or depth) with values in `[0, 1]`.
 */
typedef struct SbField SbField;

/**
 * RGB image with samples in `[0, 1]`.
 */
typedef struct SbImage SbImage;

/**
 * 68 `(x, y)` landmarks.
 */
typedef struct SbLandmarks SbLandmarks;

/**
 * Outcome of [`sb_toy_attack`].
 */
typedef struct {
  double initial_loss;
  double best_loss;
  size_t best_iteration;
  double alpha;
  double theta[6];
} SbAttackSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `len`) into `buf` and returns the full message length in bytes.
 * `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t sb_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sb_version(void);

/**
 * Creates an image from `height * width * 3` interleaved RGB samples in `[0, 1]`.
 *
 * # Safety
 * `data` must be valid for `len` reads; `out` must be writable.
 */
SbStatus sb_image_new(size_t height, size_t width, const double *data, size_t len, SbImage **out);

/**
 * Loads a PNG as an RGB image.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
SbStatus sb_image_load(const char *path, SbImage **out);

/**
 * Writes an 8-bit RGB PNG.
 *
 * # Safety
 * `img` must be a live handle and `path` a NUL-terminated string.
 */
SbStatus sb_image_save(const SbImage *img, const char *path);

/**
 * # Safety
 * `img` must be a live handle; `height` and `width` must be writable.
 */
SbStatus sb_image_dims(const SbImage *img, size_t *height, size_t *width);

/**
 * Copies the interleaved RGB samples into `buf`, which must hold exactly
 * `height * width * 3` values.
 *
 * # Safety
 * `img` must be a live handle and `buf` valid for `len` writes.
 */
SbStatus sb_image_read(const SbImage *img, double *buf, size_t len);

/**
 * # Safety
 * `img` must be null or a handle not yet freed.
 */
void sb_image_free(SbImage *img);

/**
 * Creates a mask field from `height * width` values in `[0, 1]`.
 *
 * # Safety
 * `data` must be valid for `len` reads; `out` must be writable.
 */
SbStatus sb_field_new(size_t height, size_t width, const double *data, size_t len, SbField **out);

/**
 * Loads a PNG as a single-channel field (colour is reduced to luminance).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
SbStatus sb_field_load(const char *path, SbField **out);

/**
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
SbStatus sb_field_save(const SbField *field, const char *path);

/**
 * Smooth face-shaped depth map used when no depth estimate is available.
 *
 * # Safety
 * `out` must be writable.
 */
SbStatus sb_field_face_depth(size_t height, size_t width, SbField **out);

/**
 * # Safety
 * `field` must be a live handle; `height` and `width` must be writable.
 */
SbStatus sb_field_dims(const SbField *field, size_t *height, size_t *width);

/**
 * # Safety
 * `field` must be null or a handle not yet freed.
 */
void sb_field_free(SbField *field);

/**
 * Creates landmarks from 136 values `x0, y0, x1, y1, ...`.
 *
 * # Safety
 * `xy` must be valid for `len` reads; `out` must be writable.
 */
SbStatus sb_landmarks_new(const double *xy, size_t len, SbLandmarks **out);

/**
 * Loads a JSON array of 68 `[x, y]` pairs.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
SbStatus sb_landmarks_load(const char *path, SbLandmarks **out);

/**
 * # Safety
 * `lm` must be null or a handle not yet freed.
 */
void sb_landmarks_free(SbLandmarks *lm);

/**
 * Composites a shadow with default matte settings and zero scattering.
 * `depth` may be null to use the built-in face depth.
 *
 * # Safety
 * Handles must be live (or null where allowed); `out` must be writable.
 */
SbStatus sb_compose_shadow(const SbImage *clean,
                           const SbField *mask,
                           const SbField *depth,
                           double alpha,
                           SbImage **out);

/**
 * Root-mean-square CIELAB distance; `region` may be null for the whole image.
 *
 * # Safety
 * Handles must be live (or null where allowed); `out` must be writable.
 */
SbStatus sb_rmse_lab(const SbImage *a, const SbImage *b, const SbField *region, double *out);

/**
 * Normalised mean error in percent of the outer inter-ocular distance.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
SbStatus sb_nme(const SbLandmarks *pred, const SbLandmarks *truth, double *out);

/**
 * Boundary irregularity of a single-component mask.
 *
 * # Safety
 * `mask` must be a live handle; `out` must be writable.
 */
SbStatus sb_shape_complexity(const SbField *mask, double *out);

/**
 * Runs the adversarial shadow attack against the built-in toy detector
 * with default step sizes and radii. `iterations` of 0 keeps the default.
 *
 * # Safety
 * Handles must be live; `out_image` and `summary` must be writable.
 */
SbStatus sb_toy_attack(const SbImage *clean,
                       const SbField *depth,
                       const SbLandmarks *truth,
                       const SbField *mask_init,
                       uint64_t weights_seed,
                       size_t iterations,
                       SbImage **out_image,
                       SbAttackSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHADOWBENCH_H */
