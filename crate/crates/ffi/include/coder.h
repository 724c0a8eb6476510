#ifndef CODER_H
#define CODER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum CoderStatus {
  CODER_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CODER_NULL_ARGUMENT = 1,
  CODER_IO = 2,
  /**
   * Malformed or corrupt file contents.
   */
  CODER_FORMAT = 3,
  /**
   * Inputs violate a precondition (shapes, ranges, values).
   */
  CODER_INVALID = 4,
  /**
   * A caller-provided buffer is too small.
   */
  CODER_BUFFER_TOO_SMALL = 5,
  CODER_PANIC = 6,
} CoderStatus;

/**
 * Frozen document embeddings opened from a `CDRE` file.
 */
typedef struct CoderEmbeddings CoderEmbeddings;

/**
 * Query encoder loaded from a `CDRQ` checkpoint.
 */
typedef struct CoderEncoder CoderEncoder;

/**
 * Token vocabulary loaded from a vocab TSV.
 */
typedef struct CoderVocab CoderVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *coder_version(void);

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated to
 * `cap`) into `buf` and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null with `cap == 0`.
 */
size_t coder_last_error(char *buf, size_t cap);

/**
 * Opens a `CDRE` embedding file (memory-mapped).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CoderStatus coder_embeddings_open(const char *path, struct CoderEmbeddings **out);

/**
 * # Safety
 * `h` must come from [`coder_embeddings_open`] and not be used afterwards.
 */
void coder_embeddings_free(struct CoderEmbeddings *h);

/**
 * # Safety
 * `h`, `dim` and `count` must be valid pointers.
 */
enum CoderStatus coder_embeddings_shape(const struct CoderEmbeddings *h,
                                        size_t *dim,
                                        size_t *count);

/**
 * Copies row `index` into `out` (`cap` floats, at least `dim`).
 *
 * # Safety
 * `out` must point to `cap` writable floats.
 */
enum CoderStatus coder_embeddings_row(const struct CoderEmbeddings *h,
                                      size_t index,
                                      float *out,
                                      size_t cap);

/**
 * Loads a query encoder checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CoderStatus coder_encoder_load(const char *path, struct CoderEncoder **out);

/**
 * # Safety
 * `h` must come from [`coder_encoder_load`] and not be used afterwards.
 */
void coder_encoder_free(struct CoderEncoder *h);

/**
 * Output dimension of the encoder, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live encoder handle.
 */
size_t coder_encoder_out_dim(const struct CoderEncoder *h);

/**
 * Encodes token ids (deterministic, no dropout) into `out` (`cap` ≥ out_dim).
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids; `out` must hold `cap` doubles.
 */
enum CoderStatus coder_encoder_encode(const struct CoderEncoder *h,
                                      const uint32_t *tokens,
                                      size_t n_tokens,
                                      double *out,
                                      size_t cap);

/**
 * Encodes `tokens`, scores `candidates` against the store and writes them
 * best-first into `out_ids` / `out_scores` (each `n_candidates` long).
 *
 * # Safety
 * All array arguments must hold `n_tokens` / `n_candidates` elements.
 */
enum CoderStatus coder_rerank(const struct CoderEncoder *enc,
                              const struct CoderEmbeddings *store,
                              const uint32_t *tokens,
                              size_t n_tokens,
                              const size_t *candidates,
                              size_t n_candidates,
                              size_t *out_ids,
                              double *out_scores);

/**
 * Exact top-`k` inner-product search with a query vector of length `dim`.
 * Writes `min(k, count)` hits and stores that number in `n_out`.
 *
 * # Safety
 * `query` holds `dim` doubles; `out_ids` / `out_scores` hold `k` elements.
 */
enum CoderStatus coder_dense_search(const struct CoderEmbeddings *store,
                                    const double *query,
                                    size_t dim,
                                    size_t k,
                                    size_t *out_ids,
                                    double *out_scores,
                                    size_t *n_out);

/**
 * Loads a vocabulary TSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CoderStatus coder_vocab_load(const char *path, struct CoderVocab **out);

/**
 * # Safety
 * `h` must come from [`coder_vocab_load`] and not be used afterwards.
 */
void coder_vocab_free(struct CoderVocab *h);

/**
 * Tokenizes `text` (BOS + word ids, at most `max_len`) into `out`.
 * `n_out` receives the sequence length even when `cap` is too small.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` holds `cap` ids.
 */
enum CoderStatus coder_tokenize(const struct CoderVocab *vocab,
                                const char *text,
                                size_t max_len,
                                uint32_t *out,
                                size_t cap,
                                size_t *n_out);

/**
 * List-wise KL loss. `labels` holds grades for positives and `-INFINITY`
 * elsewhere; `grad` (optional, length `n`) receives d loss / d score.
 *
 * # Safety
 * `scores` and `labels` hold `n` doubles; `loss` is writable; `grad` is null or holds `n`.
 */
enum CoderStatus coder_listnet_loss(const double *scores,
                                    const double *labels,
                                    size_t n,
                                    double *loss,
                                    double *grad);

/**
 * Two-sided paired t-test on `n` aligned values.
 *
 * # Safety
 * `a` and `b` hold `n` doubles; `t` and `p` are writable.
 */
enum CoderStatus coder_paired_t_test(const double *a,
                                     const double *b,
                                     size_t n,
                                     double *t,
                                     double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODER_H */
