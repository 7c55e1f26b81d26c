#ifndef HEED_H
#define HEED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HeedStatus {
  HEED_STATUS_OK = 0,
  HEED_STATUS_NULL_POINTER = 1,
  HEED_STATUS_INVALID_ARGUMENT = 2,
  HEED_STATUS_DENSITY = 3,
  HEED_STATUS_LOSS = 4,
  HEED_STATUS_BAD_MAGIC = 5,
  HEED_STATUS_UNSUPPORTED_VERSION = 6,
  HEED_STATUS_TRUNCATED = 7,
  HEED_STATUS_MISALIGNED = 8,
  HEED_STATUS_CACHE = 9,
  HEED_STATUS_NOT_FOUND = 10,
  HEED_STATUS_BUFFER_TOO_SMALL = 11,
  HEED_STATUS_PANIC = 12,
} HeedStatus;

/*
 Opaque set of density cache entries.
 */
typedef struct HeedCache HeedCache;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into this library from the same thread.
 */
const char *heed_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *heed_version(void);

/*
 Raw densities `rho_out` and per-image normalized densities
 `rho_tilde_out` (optional), `height * width` values each, from
 `height * width * dim` patch features.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum HeedStatus heed_patch_density(const double *features,
                                   size_t height,
                                   size_t width,
                                   size_t dim,
                                   double *rho_out,
                                   double *rho_tilde_out);

/*
 Alignment weights for `n_visual` raw densities followed by `n_text` text
 positions; writes `n_visual + n_text` values summing to that count.

 # Safety
 `rho` must hold `n_visual` values and `weights_out` room for `n_visual + n_text`.
 */
enum HeedStatus heed_sequence_weights(const double *rho,
                                      size_t n_visual,
                                      size_t n_text,
                                      double tau,
                                      double beta,
                                      double *weights_out);

/*
 Weighted residual alignment `1/(L*T) * sum_l sum_p w_p |s_lp - t_lp|^2`
 over `layers * seq * dim` buffers. A null `weights` means uniform weights.
 `grad_out` (optional) receives the gradient with respect to `student`.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum HeedStatus heed_residual_loss(const double *student,
                                   const double *teacher,
                                   size_t layers,
                                   size_t seq,
                                   size_t dim,
                                   const double *weights,
                                   double *value_out,
                                   double *grad_out);

/*
 `lambda_kl * KL(teacher || student) + lambda_ce * CE` over `seq x vocab`
 logits, averaged over positions whose label is non-negative.
 `grad_out` (optional) receives the gradient with respect to the student logits.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum HeedStatus heed_kd_loss(const double *student_logits,
                             const double *teacher_logits,
                             size_t seq,
                             size_t vocab,
                             const int64_t *labels,
                             double lambda_kl,
                             double lambda_ce,
                             double *value_out,
                             double *grad_out);

/*
 A new empty cache; release with [`heed_cache_free`].
 */
struct HeedCache *heed_cache_new(void);

/*
 # Safety
 `cache` must come from this library and not be used afterwards. Null is ignored.
 */
void heed_cache_free(struct HeedCache *cache);

/*
 Quantizes `n` normalized densities in `[0, 1]` and appends them under `sample_id`.

 # Safety
 `cache` must be a live handle and `rho_tilde` hold `n` values.
 */
enum HeedStatus heed_cache_push(struct HeedCache *cache,
                                uint64_t sample_id,
                                const double *rho_tilde,
                                size_t n);

/*
 Decodes a cache file image into a new handle written to `cache_out`.

 # Safety
 `bytes` must hold `len` bytes; `cache_out` must be writable.
 */
enum HeedStatus heed_cache_decode(const uint8_t *bytes, size_t len, struct HeedCache **cache_out);

/*
 Encodes the cache into `buf`. `written_out` receives the encoded size;
 when `capacity` is too small nothing is copied and `BufferTooSmall` is
 returned, so a first call with a null buffer and zero capacity sizes it.

 # Safety
 `cache` must be a live handle and `buf` hold `capacity` bytes.
 */
enum HeedStatus heed_cache_encode(const struct HeedCache *cache,
                                  uint8_t *buf,
                                  size_t capacity,
                                  size_t *written_out);

/*
 Number of entries.

 # Safety
 `cache` must be a live handle.
 */
enum HeedStatus heed_cache_len(const struct HeedCache *cache, size_t *len_out);

/*
 Sample id and position count of entry `index`, in file order.

 # Safety
 `cache` must be a live handle.
 */
enum HeedStatus heed_cache_entry(const struct HeedCache *cache,
                                 size_t index,
                                 uint64_t *sample_id_out,
                                 size_t *n_positions_out);

/*
 Dequantized densities of `sample_id` into `rho_tilde_out`.
 `n_out` receives the position count, also when `capacity` is too small.

 # Safety
 `cache` must be a live handle and `rho_tilde_out` hold `capacity` values.
 */
enum HeedStatus heed_cache_get(const struct HeedCache *cache,
                               uint64_t sample_id,
                               double *rho_tilde_out,
                               size_t capacity,
                               size_t *n_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEED_H */
