#ifndef STEMSEG_H
#define STEMSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StemsegStatus {
  STEMSEG_STATUS_OK = 0,
  STEMSEG_STATUS_NULL_POINTER = 1,
  STEMSEG_STATUS_INVALID_ARGUMENT = 2,
  STEMSEG_STATUS_IO = 3,
  STEMSEG_STATUS_CORRUPT_FILE = 4,
  STEMSEG_STATUS_CONFIG_MISMATCH = 5,
  STEMSEG_STATUS_UNDEFINED_METRIC = 6,
  STEMSEG_STATUS_INTERNAL = 7,
} StemsegStatus;

/**
 * Detections of one image.
 */
typedef struct StemsegDetections StemsegDetections;

/**
 * A loaded network ready for inference.
 */
typedef struct StemsegModel StemsegModel;

typedef struct StemsegDetection {
  /**
   * 1 crop, 2 dicot (the stem-mask label).
   */
  uint32_t class_label;
  /**
   * Column, sub-pixel.
   */
  double x;
  /**
   * Row, sub-pixel.
   */
  double y;
  double confidence;
  uint64_t area;
} StemsegDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *stemseg_last_error(void);

/**
 * Load a parameter file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum StemsegStatus stemseg_model_load(const char *path, struct StemsegModel **out);

/**
 * # Safety
 * `model` must come from [`stemseg_model_load`] or be null.
 */
void stemseg_model_free(struct StemsegModel *model);

/**
 * Number of input channels the model expects (3 RGB, 4 RGB + NIR), or 0
 * for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint32_t stemseg_model_input_channels(const struct StemsegModel *model);

/**
 * Run the model on one image of interleaved 8-bit pixels (`height` rows of
 * `width * channels` bytes). Writes a detections handle to `out`, and the
 * per-pixel plant labels to `plant_labels` (`width * height` bytes) unless
 * it is null.
 *
 * # Safety
 * `pixels` must point to `width * height * channels` bytes; `plant_labels`
 * to `width * height` writable bytes or null.
 */
enum StemsegStatus stemseg_model_infer(const struct StemsegModel *model,
                                       const uint8_t *pixels,
                                       uint32_t width,
                                       uint32_t height,
                                       uint32_t channels,
                                       struct StemsegDetections **out,
                                       uint8_t *plant_labels);

/**
 * Stem extraction on a caller-supplied `[classes, height, width]` array of
 * probabilities (channel-major, class 0 soil, 1 crop, 2 dicot).
 *
 * # Safety
 * `probs` must point to `classes * width * height` values; `out` must be valid.
 */
enum StemsegStatus stemseg_extract_stems(const double *probs,
                                         uint32_t classes,
                                         uint32_t width,
                                         uint32_t height,
                                         uint32_t min_area,
                                         struct StemsegDetections **out);

/**
 * # Safety
 * `dets` must be a live handle or null.
 */
uintptr_t stemseg_detections_len(const struct StemsegDetections *dets);

/**
 * Copy detection `index` (in descending confidence order) into `out`.
 *
 * # Safety
 * `dets` must be a live handle and `out` a valid pointer.
 */
enum StemsegStatus stemseg_detections_get(const struct StemsegDetections *dets,
                                          uintptr_t index,
                                          struct StemsegDetection *out);

/**
 * # Safety
 * `dets` must come from this library or be null.
 */
void stemseg_detections_free(struct StemsegDetections *dets);

/**
 * Interpolated average precision of a ranking: `tp[i]` is nonzero when the
 * detection at rank `i` is a true positive.
 *
 * # Safety
 * `tp` must point to `len` bytes (or be null with `len == 0`); `out` must be valid.
 */
enum StemsegStatus stemseg_average_precision(const uint8_t *tp,
                                             uintptr_t len,
                                             uintptr_t num_ground_truth,
                                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEMSEG_H */
