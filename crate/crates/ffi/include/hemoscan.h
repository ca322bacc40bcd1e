/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef HEMOSCAN_H
#define HEMOSCAN_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_DIMENSION = 3,
  HS_STATUS_CONFIG = 4,
  HS_STATUS_DEGENERATE_IMAGE = 5,
  HS_STATUS_FORMAT = 6,
  HS_STATUS_UNSUPPORTED_VERSION = 7,
  HS_STATUS_IO = 8,
  HS_STATUS_IMAGE = 9,
  HS_STATUS_SERIALIZATION = 10,
  HS_STATUS_PANIC = 11,
} HsStatus;

/**
 * Trained boundary network.
 */
typedef struct HsModel HsModel;

/**
 * Detection verdict for one image.
 */
typedef struct HsReport HsReport;

typedef struct HsDetectParams {
  /**
   * Chi-square significance level in (0, 1].
   */
  double alpha;
  /**
   * Smallest component kept, in pixels.
   */
  size_t min_blob;
  /**
   * 4 or 8.
   */
  uint32_t connectivity;
} HsDetectParams;

typedef struct HsComponent {
  size_t id;
  size_t pixels;
  size_t bbox_x;
  size_t bbox_y;
  size_t bbox_w;
  size_t bbox_h;
  double centroid_x;
  double centroid_y;
  double mean_d2;
  double max_d2;
} HsComponent;

typedef struct HsHsv {
  /**
   * Degrees in [0, 360).
   */
  double h;
  /**
   * In [0, 1].
   */
  double s;
  /**
   * In [0, 255].
   */
  double v;
} HsHsv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *hs_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string obtained from this library, not yet freed.
 */
void hs_string_free(char *s);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum HsStatus hs_model_load(const char *path, struct HsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`hs_model_load`], not yet freed.
 */
void hs_model_free(struct HsModel *model);

/**
 * Side of the square tile the model was trained on; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hs_model_input_size(const struct HsModel *model);

/**
 * Parameter checksum of the model; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t hs_model_checksum(const struct HsModel *model);

/**
 * Boundary map of a grayscale image of any size, written to `out` (`h·w`
 * floats in [0, 1]). Images other than the model tile size are resized to
 * the tile and the result resized back.
 *
 * # Safety
 * `gray` must point to `h·w` floats and `out` to `h·w` writable floats.
 */
enum HsStatus hs_model_predict_boundary(const struct HsModel *model,
                                        const float *gray,
                                        size_t h,
                                        size_t w,
                                        float *out);

/**
 * Default detection parameters.
 */
struct HsDetectParams hs_detect_params_default(void);

/**
 * Runs chromatic detection on an RGB image. `params` and `name` may be null
 * for the defaults and an empty name.
 *
 * # Safety
 * `rgb` must point to `3·h·w` bytes; `params` and `name` must be null or
 * valid; `out` must be writable.
 */
enum HsStatus hs_detect(const uint8_t *rgb,
                        size_t h,
                        size_t w,
                        const struct HsDetectParams *params,
                        const char *name,
                        struct HsReport **out);

/**
 * # Safety
 * `report` must be null or a handle from [`hs_detect`], not yet freed.
 */
void hs_report_free(struct HsReport *report);

/**
 * Whether any component survived; false for a null handle.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
bool hs_report_infected(const struct HsReport *report);

/**
 * Chi-square gate used for the report; NaN for a null handle.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
double hs_report_threshold(const struct HsReport *report);

/**
 * # Safety
 * `report` must be null or a live handle.
 */
size_t hs_report_component_count(const struct HsReport *report);

/**
 * Copies component `index` (0-based, largest first) into `out`.
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum HsStatus hs_report_component(const struct HsReport *report,
                                  size_t index,
                                  struct HsComponent *out);

/**
 * Serializes the report as JSON. Release the string with [`hs_string_free`].
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum HsStatus hs_report_to_json(const struct HsReport *report, char **out);

/**
 * HSV transform of one pixel.
 */
struct HsHsv hs_rgb_to_hsv(uint8_t r, uint8_t g, uint8_t b);

/**
 * Chi-square (2 degrees of freedom) critical value at significance `alpha`.
 *
 * # Safety
 * `out` must be writable.
 */
enum HsStatus hs_chi2_threshold(double alpha, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEMOSCAN_H */
