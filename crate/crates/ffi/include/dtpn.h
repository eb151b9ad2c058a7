#ifndef DTPN_H
#define DTPN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DtpnStatus {
  DTPN_STATUS_OK = 0,
  DTPN_STATUS_NULL_POINTER = 1,
  DTPN_STATUS_INVALID_UTF8 = 2,
  DTPN_STATUS_IO = 3,
  DTPN_STATUS_FORMAT = 4,
  DTPN_STATUS_VALIDATION = 5,
  DTPN_STATUS_SHAPE = 6,
  DTPN_STATUS_CONFIG = 7,
  DTPN_STATUS_NUMERIC = 8,
  DTPN_STATUS_OUT_OF_RANGE = 9,
  DTPN_STATUS_PANIC = 10,
} DtpnStatus;

typedef struct DtpnDetections DtpnDetections;

typedef struct DtpnModel DtpnModel;

typedef struct DtpnPyramid DtpnPyramid;

// One detection in normalized time.
typedef struct DtpnDetection {
  double start;
  double end;
  double score;
  uint32_t label;
} DtpnDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dtpn_version(void);

// Message for the last failed call on this thread, or NULL. Valid until the
// next call into this library from the same thread.
const char *dtpn_last_error(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DtpnStatus dtpn_pyramid_read(const char *path, struct DtpnPyramid **out);

// Build a pyramid from `len` floats holding every level back to back, level
// `s` being `(base_segments << s) × dim` values in row-major order.
//
// # Safety
// `data` must point to `len` readable floats and `out` must be valid.
enum DtpnStatus dtpn_pyramid_from_data(size_t dim,
                                       size_t scales,
                                       size_t base_segments,
                                       const float *data,
                                       size_t len,
                                       struct DtpnPyramid **out);

// # Safety
// `pyramid` must be a live handle; output pointers may be NULL to skip.
enum DtpnStatus dtpn_pyramid_shape(const struct DtpnPyramid *pyramid,
                                   size_t *dim,
                                   size_t *scales,
                                   size_t *base_segments);

// Borrow level `scale` (zero-based). The data stays valid while the handle lives.
//
// # Safety
// `pyramid` must be a live handle, `data` and `rows` valid pointers.
enum DtpnStatus dtpn_pyramid_level(const struct DtpnPyramid *pyramid,
                                   size_t scale,
                                   const float **data,
                                   size_t *rows);

// # Safety
// `pyramid` must be a live handle and `path` a NUL-terminated string.
enum DtpnStatus dtpn_pyramid_write(const struct DtpnPyramid *pyramid, const char *path);

// # Safety
// `pyramid` must be NULL or a handle not yet freed.
void dtpn_pyramid_free(struct DtpnPyramid *pyramid);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DtpnStatus dtpn_model_load(const char *path, struct DtpnModel **out);

// Class count `M` and anchor count of a loaded model.
//
// # Safety
// `model` must be a live handle; output pointers may be NULL to skip.
enum DtpnStatus dtpn_model_info(const struct DtpnModel *model,
                                size_t *num_classes,
                                size_t *num_anchors);

// # Safety
// `model` must be NULL or a handle not yet freed.
void dtpn_model_free(struct DtpnModel *model);

// Forward pass, decoding and class-wise NMS for one video.
//
// # Safety
// `model` and `pyramid` must be live handles and `out` a valid pointer.
enum DtpnStatus dtpn_detect(const struct DtpnModel *model,
                            const struct DtpnPyramid *pyramid,
                            double nms_threshold,
                            size_t top_k,
                            double score_floor,
                            struct DtpnDetections **out);

// Number of detections, 0 for NULL.
//
// # Safety
// `dets` must be NULL or a live handle.
size_t dtpn_detections_len(const struct DtpnDetections *dets);

// Borrow the detections as a contiguous array of `dtpn_detections_len`
// entries, sorted by descending score; NULL for NULL.
//
// # Safety
// `dets` must be NULL or a live handle.
const struct DtpnDetection *dtpn_detections_data(const struct DtpnDetections *dets);

// # Safety
// `dets` must be a live handle and `out` a valid pointer.
enum DtpnStatus dtpn_detections_get(const struct DtpnDetections *dets,
                                    size_t index,
                                    struct DtpnDetection *out);

// # Safety
// `dets` must be NULL or a handle not yet freed.
void dtpn_detections_free(struct DtpnDetections *dets);

// Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
double dtpn_tiou(double a_start, double a_end, double b_start, double b_end);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DTPN_H */
