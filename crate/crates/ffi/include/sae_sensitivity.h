#ifndef SAE_SENSITIVITY_H
#define SAE_SENSITIVITY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum SseStatus {
  SSE_STATUS_OK = 0,
  SSE_STATUS_NULL_POINTER = 1,
  SSE_STATUS_INVALID_ARGUMENT = 2,
  SSE_STATUS_IO = 3,
  SSE_STATUS_FORMAT = 4,
  SSE_STATUS_SHAPE = 5,
  SSE_STATUS_OUT_OF_RANGE = 6,
  SSE_STATUS_UNDEFINED = 7,
  SSE_STATUS_PANIC = 8,
} SseStatus;

/**
 * A loaded sparse autoencoder.
 */
typedef struct SseSae SseSae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sse_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sse_version(void);

/**
 * Loads an SAE from a safetensors file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SseStatus sse_sae_load(const char *path, struct SseSae **out);

/**
 * Releases a handle from [`sse_sae_load`]. Null is ignored.
 *
 * # Safety
 * `sae` must come from `sse_sae_load` and not have been freed.
 */
void sse_sae_free(struct SseSae *sae);

/**
 * Number of features, or 0 for a null handle.
 *
 * # Safety
 * `sae` must be null or a live handle.
 */
size_t sse_sae_width(const struct SseSae *sae);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `sae` must be null or a live handle.
 */
size_t sse_sae_d_model(const struct SseSae *sae);

/**
 * Encodes `n_tokens` row-major rows of `d_model` floats into
 * `n_tokens * width` feature activations written to `output`.
 *
 * # Safety
 * `input` must hold `n_tokens * d_model` floats and `output` `output_len`.
 */
enum SseStatus sse_sae_encode(const struct SseSae *sae,
                              const float *input,
                              size_t n_tokens,
                              size_t d_model,
                              float *output,
                              size_t output_len);

/**
 * Largest cosine similarity between `feature`'s decoder row and any other.
 *
 * # Safety
 * `sae` must be a live handle and `out` a valid pointer.
 */
enum SseStatus sse_sae_max_decoder_cosine(const struct SseSae *sae, uint32_t feature, double *out);

/**
 * Length of the longest common contiguous run of token ids.
 *
 * # Safety
 * `a` and `b` must hold `a_len` and `b_len` ids (null allowed when empty).
 */
enum SseStatus sse_lcs(const uint32_t *a,
                       size_t a_len,
                       const uint32_t *b,
                       size_t b_len,
                       size_t *out);

/**
 * Longest common run between `b` and substrings of `a` that end at or
 * before index `last` (the last activating token of an example).
 *
 * # Safety
 * Same as [`sse_lcs`].
 */
enum SseStatus sse_lcs_ending_at(const uint32_t *a,
                                 size_t a_len,
                                 size_t last,
                                 const uint32_t *b,
                                 size_t b_len,
                                 size_t *out);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `x` and `y` must hold `n` doubles and `out` must be valid.
 */
enum SseStatus sse_spearman(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAE_SENSITIVITY_H */
