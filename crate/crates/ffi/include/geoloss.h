#ifndef GEOLOSS_H
#define GEOLOSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum GeolossStatus {
  GEOLOSS_STATUS_OK = 0,
  GEOLOSS_STATUS_NULL_POINTER = 1,
  GEOLOSS_STATUS_INVALID_ARGUMENT = 2,
  GEOLOSS_STATUS_IO = 3,
  GEOLOSS_STATUS_FORMAT = 4,
  GEOLOSS_STATUS_DIMENSION_MISMATCH = 5,
  GEOLOSS_STATUS_NON_FINITE = 6,
  GEOLOSS_STATUS_MISSING_INPUT = 7,
  GEOLOSS_STATUS_SCENE = 8,
  GEOLOSS_STATUS_PANIC = 9,
} GeolossStatus;

/**
 * Loss selector.
 */
typedef enum GeolossLoss {
  GEOLOSS_LOSS_OP = 0,
  GEOLOSS_LOSS_AP = 1,
  GEOLOSS_LOSS_S = 2,
  GEOLOSS_LOSS_TOTAL = 3,
} GeolossLoss;

/**
 * Loss weights, threshold and photometric parameters.
 */
typedef struct GeolossConfig GeolossConfig;

/**
 * A loss evaluation state, with ground truth when rendered.
 */
typedef struct GeolossScene GeolossScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *geoloss_last_error(void);

/**
 * Library version, a static nul-terminated string.
 */
const char *geoloss_version(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum GeolossStatus geoloss_config_new(struct GeolossConfig **out);

/**
 * Configuration from a JSON document with the loss configuration fields;
 * missing fields keep their defaults.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` writable.
 */
enum GeolossStatus geoloss_config_from_json(const char *json, struct GeolossConfig **out);

/**
 * Releases a configuration; null is ignored.
 *
 * # Safety
 * `config` must come from this library and not be used afterwards.
 */
void geoloss_config_free(struct GeolossConfig *config);

/**
 * Renders a scene from its JSON specification.
 *
 * # Safety
 * `spec_json` must be a nul-terminated string and `out` writable.
 */
enum GeolossStatus geoloss_scene_render(const char *spec_json, struct GeolossScene **out);

/**
 * Loads the inputs `loss` needs from a scene directory.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` writable.
 */
enum GeolossStatus geoloss_scene_load(const char *dir,
                                      enum GeolossLoss loss,
                                      struct GeolossScene **out);

/**
 * Writes a rendered scene into `dir`.
 *
 * # Safety
 * `scene` must be a live handle and `dir` a nul-terminated string.
 */
enum GeolossStatus geoloss_scene_write(const struct GeolossScene *scene, const char *dir);

/**
 * Image size of a scene.
 *
 * # Safety
 * `scene` must be a live handle; `width` and `height` writable.
 */
enum GeolossStatus geoloss_scene_size(const struct GeolossScene *scene,
                                      size_t *width,
                                      size_t *height);

/**
 * Releases a scene; null is ignored.
 *
 * # Safety
 * `scene` must come from this library and not be used afterwards.
 */
void geoloss_scene_free(struct GeolossScene *scene);

/**
 * Evaluates `loss` on `scene`. `config` may be null for the defaults;
 * `per_pixel` may be null, otherwise it receives `width * height` values.
 *
 * # Safety
 * Handles must be live; `value` writable; `per_pixel` null or holding
 * `width * height` doubles.
 */
enum GeolossStatus geoloss_eval_loss(const struct GeolossScene *scene,
                                     const struct GeolossConfig *config,
                                     enum GeolossLoss loss,
                                     double *value,
                                     double *per_pixel);

/**
 * Bilinear splat count `R` of a source-to-target flow given as separate
 * `u` and `v` planes of the source grid, written to `out`
 * (`target_width * target_height` values).
 *
 * # Safety
 * `u` and `v` hold `width * height` doubles, `out` holds
 * `target_width * target_height`.
 */
enum GeolossStatus geoloss_range_map(const double *u,
                                     const double *v,
                                     size_t width,
                                     size_t height,
                                     size_t target_width,
                                     size_t target_height,
                                     double *out);

/**
 * Occlusion map `min(1, R)` of a source-to-target flow; see
 * [`geoloss_range_map`] for the layout.
 *
 * # Safety
 * As for [`geoloss_range_map`].
 */
enum GeolossStatus geoloss_occlusion_map(const double *u,
                                         const double *v,
                                         size_t width,
                                         size_t height,
                                         size_t target_width,
                                         size_t target_height,
                                         double *out);

/**
 * Per-pixel softmax direction weights of backward/forward photometric
 * errors, `n` values each.
 *
 * # Safety
 * All four buffers hold `n` doubles.
 */
enum GeolossStatus geoloss_direction_weights(const double *l_bo,
                                             const double *l_fo,
                                             size_t n,
                                             double *w_bo,
                                             double *w_fo);

/**
 * Binary task weights of a loss pair under the log-odds `threshold`.
 *
 * # Safety
 * All four buffers hold `n` doubles.
 */
enum GeolossStatus geoloss_task_weights(const double *l_o,
                                        const double *l_d,
                                        size_t n,
                                        double threshold,
                                        double *w_o,
                                        double *w_d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOLOSS_H */
