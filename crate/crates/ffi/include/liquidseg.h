#ifndef LIQUIDSEG_H
#define LIQUIDSEG_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_POINTER = 1,
  LS_STATUS_INVALID_ARGUMENT = 2,
  LS_STATUS_DIMENSION_MISMATCH = 3,
  LS_STATUS_IO = 4,
  LS_STATUS_CHECKPOINT = 5,
  LS_STATUS_PANIC = 6,
  LS_STATUS_OTHER = 7,
} LsStatus;

/**
 * Per-pixel background mixture.
 */
typedef struct LsBackgroundModel LsBackgroundModel;

/**
 * Latched two-state pouring controller.
 */
typedef struct LsController LsController;

/**
 * Trained UNet.
 */
typedef struct LsSegModel LsSegModel;

/**
 * Inclusive pixel box.
 */
typedef struct LsBox {
  size_t x_min;
  size_t y_min;
  size_t x_max;
  size_t y_max;
} LsBox;

/**
 * Copy the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length in
 * bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t ls_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ls_version(void);

/**
 * Load a segmentation checkpoint written by `liquidseg train-seg`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum LsStatus ls_seg_model_load(const char *path, struct LsSegModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ls_seg_model_load`] not yet freed.
 */
void ls_seg_model_free(struct LsSegModel *model);

/**
 * Threshold the UNet probability map. `out_mask` receives `height * width`
 * bytes.
 *
 * # Safety
 * Pointers must be valid for the sizes described in the crate docs.
 */
enum LsStatus ls_seg_model_predict(const struct LsSegModel *model,
                                   const float *rgb,
                                   size_t height,
                                   size_t width,
                                   double threshold,
                                   uint8_t *out_mask);

/**
 * Fit a background model from `num_frames` consecutive empty-scene frames.
 *
 * # Safety
 * `frames` must hold `num_frames * height * width * 3` floats; `out` must
 * be valid for writes.
 */
enum LsStatus ls_background_fit(const float *frames,
                                size_t num_frames,
                                size_t height,
                                size_t width,
                                size_t max_components,
                                uint64_t seed,
                                struct LsBackgroundModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ls_background_fit`] not yet freed.
 */
void ls_background_free(struct LsBackgroundModel *model);

/**
 * Foreground mask: pixels farther than `threshold_sigma` from every
 * background component.
 *
 * # Safety
 * Pointers must be valid for the sizes described in the crate docs.
 */
enum LsStatus ls_background_subtract(const struct LsBackgroundModel *model,
                                     const float *rgb,
                                     size_t height,
                                     size_t width,
                                     double threshold_sigma,
                                     uint8_t *out_mask);

/**
 * Intersection over union of two masks of the same size.
 *
 * # Safety
 * `a` and `b` must hold `height * width` bytes; `out` must be writable.
 */
enum LsStatus ls_iou(const uint8_t *a, const uint8_t *b, size_t height, size_t width, double *out);

/**
 * Fill level of `mask` inside the cup box after opening with a
 * `kernel x kernel` square and keeping the largest component.
 *
 * # Safety
 * `mask` must hold `height * width` bytes; `out_level` must be writable.
 */
enum LsStatus ls_estimate_fill(const uint8_t *mask,
                               size_t height,
                               size_t width,
                               struct LsBox cup,
                               size_t kernel,
                               double *out_level);

/**
 * New controller with the default tilt dynamics.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum LsStatus ls_controller_new(double l_target,
                                double epsilon,
                                double initial_pour_duration,
                                double loop_period,
                                struct LsController **out);

/**
 * # Safety
 * `ctl` must be null or a handle from [`ls_controller_new`] not yet freed.
 */
void ls_controller_free(struct LsController *ctl);

/**
 * One tick at time `t` with fill reading `l_hat`. Writes 1 to `out_pouring`
 * to keep pouring, 0 to stop. Once stopped the controller stays stopped
 * until [`ls_controller_reset`].
 *
 * # Safety
 * `ctl` must be a live handle; `out_pouring` must be writable.
 */
enum LsStatus ls_controller_step(struct LsController *ctl,
                                 double l_hat,
                                 double t,
                                 uint8_t *out_pouring);

/**
 * Clear the stop latch for a new episode.
 *
 * # Safety
 * `ctl` must be a live handle.
 */
enum LsStatus ls_controller_reset(struct LsController *ctl);

#endif  /* LIQUIDSEG_H */
