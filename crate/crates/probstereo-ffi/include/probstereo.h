/* C API for probstereo: probabilistic dense stereo matching with uncertainty. */

#ifndef PROBSTEREO_H
#define PROBSTEREO_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_ARGUMENT = 1,
  PS_STATUS_INVALID_UTF8 = 2,
  PS_STATUS_IO_ERROR = 3,
  PS_STATUS_FORMAT_ERROR = 4,
  PS_STATUS_CONFIG_ERROR = 5,
  PS_STATUS_SHAPE_ERROR = 6,
  PS_STATUS_NUMERIC_ERROR = 7,
  PS_STATUS_PANIC = 8,
} PsStatus;

// Opaque model handle; create with `ps_model_load`, release with
// `ps_model_free`.
typedef struct PsModel PsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ps_version(void);

// Copy the last error message of this thread into `buf` (truncated to
// `len` bytes including the terminator). Returns the full message length.
//
// # Safety
// `buf` must point to `len` writable bytes, or be NULL (query mode).
uintptr_t ps_last_error_message(char *buf, uintptr_t len);

// Load a checkpoint from `path` into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string, `out` a valid pointer.
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

// Release a model handle. NULL is a no-op.
//
// # Safety
// `model` must come from `ps_model_load` and not be used afterwards.
void ps_model_free(struct PsModel *model);

// Image channels the model expects (1 grayscale, 3 RGB).
//
// # Safety
// `model` must be a live handle.
uint32_t ps_model_input_channels(const struct PsModel *model);

// Disparity search range `D`; predictions lie in `[0, D-1]` pixels.
//
// # Safety
// `model` must be a live handle.
uint32_t ps_model_max_disparity(const struct PsModel *model);

// Spatial granularity; images whose dims are not multiples of this are
// reflection-padded internally and the outputs cropped back.
//
// # Safety
// `model` must be a live handle.
uint32_t ps_model_spatial_multiple(const struct PsModel *model);

// Monte-Carlo stereo prediction.
//
// `left` and `right` are channel-major `channels x height x width` f32
// buffers with intensities in `[0, 1]`. Each non-NULL output buffer
// receives `height x width` row-major f32 values: the mean disparity in
// pixels and the three uncertainty standard deviations in pixels.
// `t` is the number of stochastic passes; `seed` makes the call
// deterministic.
//
// # Safety
// Buffers must match the documented sizes.
enum PsStatus ps_predict(const struct PsModel *model,
                         const float *left,
                         const float *right,
                         uintptr_t height,
                         uintptr_t width,
                         uintptr_t channels,
                         uint32_t t,
                         uint64_t seed,
                         float *out_disparity,
                         float *out_aleatoric,
                         float *out_epistemic,
                         float *out_combined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBSTEREO_H */
