#ifndef COSTFILTER_H
#define COSTFILTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfBadRule {
  CF_BAD_RULE_OR = 0,
  CF_BAD_RULE_AND = 1,
} CfBadRule;

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_ARGUMENT = 1,
  CF_STATUS_INVALID_ARGUMENT = 2,
  CF_STATUS_CONFIG = 3,
  CF_STATUS_DATA = 4,
  CF_STATUS_IO = 5,
  CF_STATUS_TRAINING = 6,
  CF_STATUS_PANIC = 7,
} CfStatus;

/**
 * Dense disparity map with a per-pixel validity flag.
 */
typedef struct CfDisparity CfDisparity;

/**
 * Stereo model with loaded or initialized parameters.
 */
typedef struct CfModel CfModel;

typedef struct CfMetrics {
  double epe;
  double bad1;
  double bad3;
  size_t pixels;
} CfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cf_last_error(void);

/**
 * Builds a model from a JSON run configuration overlaid on the defaults
 * (`NULL` keeps the defaults). A `"weights"` key names the parameter file;
 * learned filters require it.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` must be
 * writable.
 */
enum CfStatus cf_model_new(const char *config_json, struct CfModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`cf_model_new`] not yet freed.
 */
void cf_model_free(struct CfModel *model);

/**
 * Number of disparity hypotheses at full resolution.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t cf_model_max_disp(const struct CfModel *model);

/**
 * Predicts a full-resolution disparity map. `left` and `right` hold
 * `channels·height·width` channels-first samples in `[0, 1]`.
 *
 * # Safety
 * `model` must be a live handle, both image pointers must address
 * `channels·height·width` floats, and `out` must be writable.
 */
enum CfStatus cf_match(const struct CfModel *model,
                       const float *left,
                       const float *right,
                       size_t channels,
                       size_t height,
                       size_t width,
                       struct CfDisparity **out);

/**
 * Reads a disparity file (`.png` as KITTI 16-bit, otherwise PFM). PFM
 * values that are non-finite, negative or `>= max_disp` are invalid.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CfStatus cf_disparity_read(const char *path, float max_disp, struct CfDisparity **out);

/**
 * Writes a disparity file; the format follows the extension.
 *
 * # Safety
 * `disp` must be a live handle and `path` a NUL-terminated string.
 */
enum CfStatus cf_disparity_write(const struct CfDisparity *disp, const char *path);

/**
 * # Safety
 * `disp` must be a live handle or NULL.
 */
size_t cf_disparity_width(const struct CfDisparity *disp);

/**
 * # Safety
 * `disp` must be a live handle or NULL.
 */
size_t cf_disparity_height(const struct CfDisparity *disp);

/**
 * Row-major values, `width·height` entries owned by the handle.
 *
 * # Safety
 * `disp` must be a live handle or NULL.
 */
const float *cf_disparity_values(const struct CfDisparity *disp);

/**
 * Row-major validity flags, `width·height` entries owned by the handle.
 *
 * # Safety
 * `disp` must be a live handle or NULL.
 */
const bool *cf_disparity_valid(const struct CfDisparity *disp);

/**
 * # Safety
 * `disp` must be NULL or a handle not yet freed.
 */
void cf_disparity_free(struct CfDisparity *disp);

/**
 * EPE and bad-1/bad-3 ratios of `pred` against the valid pixels of `gt`.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum CfStatus cf_evaluate(const struct CfDisparity *pred,
                          const struct CfDisparity *gt,
                          enum CfBadRule rule,
                          struct CfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSTFILTER_H */
