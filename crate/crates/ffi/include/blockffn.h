#ifndef BLOCKFFN_H
#define BLOCKFFN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Draft proposer for [`bffn_spec_decode`].
 */
typedef enum BffnDraftPolicy {
  BFFN_DRAFT_POLICY_SELF_GREEDY = 0,
  BFFN_DRAFT_POLICY_NGRAM = 1,
  BFFN_DRAFT_POLICY_RANDOM = 2,
} BffnDraftPolicy;

/**
 * Result code of every fallible call.
 */
typedef enum BffnStatus {
  BFFN_STATUS_OK = 0,
  BFFN_STATUS_NULL_POINTER = 1,
  BFFN_STATUS_INVALID_ARGUMENT = 2,
  BFFN_STATUS_IO = 3,
  BFFN_STATUS_CHECKPOINT = 4,
  BFFN_STATUS_CONTRACT = 5,
  BFFN_STATUS_NON_FINITE = 6,
  /**
   * Output buffer too small; the required length was still written.
   */
  BFFN_STATUS_BUFFER_TOO_SMALL = 7,
  BFFN_STATUS_PANIC = 8,
} BffnStatus;

/**
 * A loaded checkpoint.
 */
typedef struct BffnModel BffnModel;

/**
 * Geometry of a loaded model.
 */
typedef struct BffnModelInfo {
  size_t vocab_size;
  size_t context;
  size_t n_layers;
  size_t d_h;
  size_t d_e;
  size_t n_experts;
  uint64_t step;
} BffnModelInfo;

/**
 * Speculative decoding statistics.
 */
typedef struct BffnDecodeStats {
  size_t tokens_generated;
  size_t steps;
  /**
   * NaN when no verification step ran.
   */
  double mean_accepted;
  uint64_t counted_ffn_bytes;
  uint64_t counted_ffn_bytes_dense_equivalent;
  uint64_t dense_ar_bytes_per_token;
} BffnDecodeStats;

/**
 * Sparsity of one activation matrix. Undefined values are NaN.
 */
typedef struct BffnSparsity {
  double tls;
  double cls;
  double reuse_ratio;
  double union_sparsity;
} BffnSparsity;

/**
 * Counted cost of one chunk through the union kernel.
 */
typedef struct BffnChunkCost {
  size_t union_size;
  uint64_t expert_weight_bytes_touched;
  uint64_t dense_expert_weight_bytes;
  uint64_t flops_sparse;
  uint64_t flops_dense;
  double bytes_ratio;
} BffnChunkCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure; empty after a
 * success. The pointer stays valid until the thread's next call.
 */
const char *bffn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bffn_version(void);

/**
 * Loads a `.bffn` checkpoint into a new handle written to `out_model`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out_model` must be writable.
 */
enum BffnStatus bffn_model_load(const char *path, struct BffnModel **out_model);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`bffn_model_load`] not yet freed.
 */
void bffn_model_free(struct BffnModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum BffnStatus bffn_model_info(const struct BffnModel *model, struct BffnModelInfo *out);

/**
 * Plain greedy decoding of `max_tokens` tokens after the prompt.
 *
 * `out_len` receives the token count even when the buffer is too small.
 *
 * # Safety
 * `model` must be a live handle, `prompt` must hold `prompt_len` values,
 * `out_tokens` must hold `out_cap` values and `out_len` must be writable.
 */
enum BffnStatus bffn_greedy_decode(const struct BffnModel *model,
                                   const uint32_t *prompt,
                                   size_t prompt_len,
                                   size_t max_tokens,
                                   uint32_t *out_tokens,
                                   size_t out_cap,
                                   size_t *out_len);

/**
 * Draft-then-verify decoding with `n` drafts per step. The output equals
 * [`bffn_greedy_decode`] for every policy.
 *
 * The n-gram policy builds its table of `ngram_order` from `corpus`, or from
 * the checkpoint's training split when `corpus` is null. `seed` drives the
 * random policy. `stats` may be null.
 *
 * # Safety
 * As [`bffn_greedy_decode`]; `corpus` must be null or hold `corpus_len`
 * values; `stats` must be null or writable.
 */
enum BffnStatus bffn_spec_decode(const struct BffnModel *model,
                                 enum BffnDraftPolicy policy,
                                 size_t n,
                                 size_t ngram_order,
                                 uint64_t seed,
                                 const uint32_t *corpus,
                                 size_t corpus_len,
                                 const uint32_t *prompt,
                                 size_t prompt_len,
                                 size_t max_tokens,
                                 uint32_t *out_tokens,
                                 size_t out_cap,
                                 size_t *out_len,
                                 struct BffnDecodeStats *stats);

/**
 * TLS, `CLS_chunk_len`, reuse ratio and union sparsity of a row-major
 * `[rows × cols]` activation matrix. An entry is active when it exceeds
 * `threshold`.
 *
 * # Safety
 * `a` must hold `rows · cols` floats; `out` must be writable.
 */
enum BffnStatus bffn_sparsity(const float *a,
                              size_t rows,
                              size_t cols,
                              size_t chunk_len,
                              double threshold,
                              struct BffnSparsity *out);

/**
 * Counted bytes and FLOPs of one chunk whose row-major `[rows × cols]`
 * activations select experts of shape `d_h × d_e`; `cols` is the expert
 * count. Nonzero entries are active.
 *
 * # Safety
 * `a` must hold `rows · cols` floats; `out` must be writable.
 */
enum BffnStatus bffn_chunk_cost(const float *a,
                                size_t rows,
                                size_t cols,
                                size_t d_h,
                                size_t d_e,
                                size_t bytes_per_param,
                                struct BffnChunkCost *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKFFN_H */
