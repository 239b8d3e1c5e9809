#ifndef SEMIFREDDO_H
#define SEMIFREDDO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  // Unreadable or malformed input data, or a missing file.
  SF_STATUS_DATA = 3,
  // Topology, shape or numeric contract violated.
  SF_STATUS_CONTRACT = 4,
  // The library panicked; the handle involved should be discarded.
  SF_STATUS_INTERNAL = 5,
} SfStatus;

typedef enum SfScheme {
  // Ratio `a` everywhere.
  SF_SCHEME_UNIFORM = 0,
  // Linear in depth from `a` down to `b`.
  SF_SCHEME_RAMP_DOWN = 1,
  // Linear in depth from `a` up to `b`.
  SF_SCHEME_RAMP_UP = 2,
  // Frozen core fully frozen; `a` and `b` ignored.
  SF_SCHEME_CORE_PARTITION = 3,
} SfScheme;

typedef enum SfCore {
  SF_CORE_FROZEN = 0,
  SF_CORE_TRAINABLE1 = 1,
  SF_CORE_TRAINABLE2 = 2,
} SfCore;

// Float weights, freeze plan and the graph they belong to.
typedef struct SfModel SfModel;

// Quantized int8 network.
typedef struct SfQGraph SfQGraph;

// Network description.
typedef struct SfSpec SfSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Message for the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *sf_last_error(void);

// Reference VGA backbone.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum SfStatus sf_spec_default(struct SfSpec **out);

// Small 32x32 single-channel network with `classes` outputs.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum SfStatus sf_spec_desk(size_t classes, struct SfSpec **out);

// Parse a JSON spec.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid handle slot.
enum SfStatus sf_spec_from_json(const char *json, struct SfSpec **out);

// # Safety
// `spec` must be null or a handle from an `sf_spec_*` constructor that has
// not been freed.
void sf_spec_free(struct SfSpec *spec);

// SHA-256 topology hash, written to `out[0..32]`.
//
// # Safety
// `spec` must be a live handle and `out` must point to 32 writable bytes.
enum SfStatus sf_spec_topology_hash(const struct SfSpec *spec, uint8_t *out);

// Conv-weight freezing ratio when the frozen core is fully frozen and the
// cores in `core_mask` (bit 0 frozen, bit 1 first trainable, bit 2 second)
// are counted.
//
// # Safety
// `spec` must be a live handle and `out` a valid pointer.
enum SfStatus sf_spec_effective_ratio(const struct SfSpec *spec, uint32_t core_mask, double *out);

// Frame rate at `width x height` with `repeats` tail passes, using the
// default clock and reload bandwidth.
//
// # Safety
// `spec` must be a live handle and `out` a valid pointer.
enum SfStatus sf_spec_estimate_fps(const struct SfSpec *spec,
                                   size_t repeats,
                                   size_t width,
                                   size_t height,
                                   double *out);

// Freshly initialized weights for `spec`, with nothing frozen.
//
// # Safety
// `spec` must be a live handle and `out` a valid handle slot.
enum SfStatus sf_model_new(const struct SfSpec *spec, uint64_t seed, struct SfModel **out);

// Load a weight bundle. When `spec` is not null the bundle must have been
// written for that spec.
//
// # Safety
// `path` must be a NUL-terminated string, `spec` null or a live handle and
// `out` a valid handle slot.
enum SfStatus sf_model_load(const char *path, const struct SfSpec *spec, struct SfModel **out);

// Write the model as a weight bundle.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum SfStatus sf_model_save(const struct SfModel *model, const char *path);

// # Safety
// `model` must be null or a live handle from `sf_model_new`/`sf_model_load`.
void sf_model_free(struct SfModel *model);

// Replace the freeze plan. `a` and `b` are the scheme's ratios.
//
// # Safety
// `model` must be a live handle.
enum SfStatus sf_model_freeze(struct SfModel *model,
                              enum SfScheme scheme,
                              double a,
                              double b,
                              uint64_t seed);

// Frozen fraction of all backbone conv weights under the current plan.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SfStatus sf_model_effective_ratio(const struct SfModel *model, double *out);

// Number of class scores per image.
//
// # Safety
// `model` must be a live handle.
size_t sf_model_num_outputs(const struct SfModel *model);

// Float inference on `n` images of `c x h x w` (NCHW, row-major). Writes
// `n * sf_model_num_outputs(model)` scores.
//
// # Safety
// `model` must be a live handle, `input` must hold `n*c*h*w` floats and
// `out` must have room for `out_len` floats.
enum SfStatus sf_model_forward(const struct SfModel *model,
                               const float *input,
                               size_t n,
                               size_t c,
                               size_t h,
                               size_t w,
                               enum SfCore head,
                               bool joint,
                               float *out,
                               size_t out_len);

// Quantize the model, calibrating activation ranges on `n` images.
//
// # Safety
// `model` must be a live handle, `calibration` must hold `n*c*h*w` floats
// and `out` must be a valid handle slot.
enum SfStatus sf_model_quantize(const struct SfModel *model,
                                const float *calibration,
                                size_t n,
                                size_t c,
                                size_t h,
                                size_t w,
                                enum SfCore head,
                                bool joint,
                                struct SfQGraph **out);

// # Safety
// `qgraph` must be null or a live handle from `sf_model_quantize`.
void sf_qgraph_free(struct SfQGraph *qgraph);

// Exponent `e` of the int8 input: pixel values are `q * 2^e`.
//
// # Safety
// `qgraph` must be a live handle and `out` a valid pointer.
enum SfStatus sf_qgraph_input_exponent(const struct SfQGraph *qgraph, int32_t *out);

// Integer inference on one int8 image of `c x h x w` at exponent
// `exponent`. Writes the int8 scores and their exponent.
//
// # Safety
// `qgraph` must be a live handle, `input` must hold `c*h*w` bytes, `out`
// must have room for `out_len` bytes and `out_exponent` must be valid.
enum SfStatus sf_qgraph_infer_int8(const struct SfQGraph *qgraph,
                                   const int8_t *input,
                                   size_t c,
                                   size_t h,
                                   size_t w,
                                   int32_t exponent,
                                   int8_t *out,
                                   size_t out_len,
                                   int32_t *out_exponent);

// Quantize one float image with the graph's input exponent and run integer
// inference. Writes dequantized scores.
//
// # Safety
// `qgraph` must be a live handle, `input` must hold `c*h*w` floats and
// `out` must have room for `out_len` floats.
enum SfStatus sf_qgraph_infer(const struct SfQGraph *qgraph,
                              const float *input,
                              size_t c,
                              size_t h,
                              size_t w,
                              float *out,
                              size_t out_len);

// Total silicon area in mm^2 with unit costs calibrated on the reference
// backbone.
//
// # Safety
// `qgraph` must be a live handle and `out` a valid pointer.
enum SfStatus sf_qgraph_area_mm2(const struct SfQGraph *qgraph, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMIFREDDO_H */
