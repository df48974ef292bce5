#ifndef JOINTTOK_H
#define JOINTTOK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum JtStatus {
  JT_STATUS_OK = 0,
  JT_STATUS_NULL_POINTER = 1,
  JT_STATUS_INVALID_ARGUMENT = 2,
  JT_STATUS_IO = 3,
  JT_STATUS_FORMAT = 4,
  JT_STATUS_CONFIG = 5,
  JT_STATUS_NUMERIC = 6,
  JT_STATUS_SHAPE = 7,
  JT_STATUS_BUFFER_TOO_SMALL = 8,
  JT_STATUS_PANIC = 9,
} JtStatus;

/**
 * A loaded VQ tokenizer.
 */
typedef struct JtTokenizer JtTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *jt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *jt_version(void);

/**
 * Loads a VQ tokenizer checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum JtStatus jt_tokenizer_load(const char *path, struct JtTokenizer **out);

/**
 * Releases a tokenizer. NULL is ignored.
 *
 * # Safety
 * `tok` must come from [`jt_tokenizer_load`] and not be used afterwards.
 */
void jt_tokenizer_free(struct JtTokenizer *tok);

/**
 * Number of codebook entries, or 0 for NULL.
 *
 * # Safety
 * `tok` must be NULL or a live handle.
 */
uint32_t jt_tokenizer_codebook_size(const struct JtTokenizer *tok);

/**
 * Token grid `(slots, rows, cols)` for a clip of the given size.
 *
 * # Safety
 * `tok` must be a live handle; `out_grid` must hold three `size_t`.
 */
enum JtStatus jt_tokenizer_grid(const struct JtTokenizer *tok,
                                size_t frames,
                                size_t height,
                                size_t width,
                                size_t *out_grid);

/**
 * Quantizes a clip into code indices.
 *
 * `pixels` holds `frames·height·width·3` floats. Up to `capacity` indices
 * are written to `out_indices`; `*written` receives the token count.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum JtStatus jt_tokenizer_encode(struct JtTokenizer *tok,
                                  const float *pixels,
                                  size_t frames,
                                  size_t height,
                                  size_t width,
                                  uint32_t *out_indices,
                                  size_t capacity,
                                  size_t *written);

/**
 * Decodes a `slots × rows × cols` grid of indices to pixels.
 *
 * Up to `capacity` floats are written to `out_pixels`; `*written` receives
 * the pixel value count `frames·height·width·3`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum JtStatus jt_tokenizer_decode(const struct JtTokenizer *tok,
                                  const uint32_t *indices,
                                  size_t slots,
                                  size_t rows,
                                  size_t cols,
                                  float *out_pixels,
                                  size_t capacity,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JOINTTOK_H */
