#ifndef HVPP_H
#define HVPP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum HvppStatus {
  HVPP_STATUS_OK = 0,
  HVPP_STATUS_NULL_POINTER = 1,
  HVPP_STATUS_INVALID_ARGUMENT = 2,
  HVPP_STATUS_OUT_OF_RANGE = 3,
  HVPP_STATUS_IO = 4,
  HVPP_STATUS_FORMAT = 5,
  HVPP_STATUS_DOMAIN = 6,
  HVPP_STATUS_CONFIG = 7,
  HVPP_STATUS_MANIFEST = 8,
  HVPP_STATUS_NON_FINITE_GRADIENT = 9,
  HVPP_STATUS_PANIC = 10,
} HvppStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct HvppModel HvppModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *hvpp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hvpp_version(void);

/**
 * Load a checkpoint. On success `*out` receives a handle to free with
 * [`hvpp_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HvppStatus hvpp_model_load(const char *path, struct HvppModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hvpp_model_load`] and not have been freed.
 */
void hvpp_model_free(struct HvppModel *model);

/**
 * Number of scalar parameters of a model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum HvppStatus hvpp_model_num_params(const struct HvppModel *model, size_t *out);

/**
 * Enhance one planar 8-bit 4:2:0 frame (Y then U then V, no padding).
 * `input` and `output` each hold `width * height * 3 / 2` bytes and may
 * alias.
 *
 * # Safety
 * `model` must be a live handle. `input` must be readable and `output`
 * writable for the frame size.
 */
enum HvppStatus hvpp_model_enhance_i420(const struct HvppModel *model,
                                        const uint8_t *input,
                                        uint8_t *output,
                                        size_t width,
                                        size_t height,
                                        uint32_t qp);

/**
 * PSNR in dB of two 8-bit planes of `len` samples; `+inf` when identical.
 *
 * # Safety
 * `reference` and `test` must be readable for `len` bytes; `out` writable.
 */
enum HvppStatus hvpp_psnr(const uint8_t *reference,
                          const uint8_t *test,
                          size_t len,
                          double peak,
                          double *out);

/**
 * MS-SSIM of two `width x height` 8-bit planes.
 *
 * # Safety
 * `reference` and `test` must be readable for `width * height` bytes;
 * `out` writable.
 */
enum HvppStatus hvpp_ms_ssim(const uint8_t *reference,
                             const uint8_t *test,
                             size_t width,
                             size_t height,
                             double *out);

/**
 * BD-rate in percent of the test curve against the anchor. Points may be
 * given in any order.
 *
 * # Safety
 * Each rate/quality array must be readable for its count; `out` writable.
 */
enum HvppStatus hvpp_bd_rate(const double *anchor_rates,
                             const double *anchor_quality,
                             size_t anchor_len,
                             const double *test_rates,
                             const double *test_quality,
                             size_t test_len,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HVPP_H */
