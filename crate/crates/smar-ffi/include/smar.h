#ifndef SMAR_H
#define SMAR_H

/* Generated by cbindgen from smar-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Item-side representation an index is built from.
 */
typedef enum smar_index_mode_t {
  SMAR_INDEX_MODE_T_TEXT = 0,
  SMAR_INDEX_MODE_T_IMAGE = 1,
  SMAR_INDEX_MODE_T_MULTIMODAL = 2,
} smar_index_mode_t;

/**
 * Routing decision for a query.
 */
typedef enum smar_route_t {
  SMAR_ROUTE_T_TEXT = 0,
  SMAR_ROUTE_T_MULTIMODAL = 1,
} smar_route_t;

/**
 * Result codes for every fallible FFI call.
 */
typedef enum smar_status_t {
  SMAR_STATUS_T_OK = 0,
  SMAR_STATUS_T_NULL_ARGUMENT = 1,
  SMAR_STATUS_T_INVALID_UTF8 = 2,
  SMAR_STATUS_T_IO = 3,
  SMAR_STATUS_T_BAD_INPUT = 4,
  SMAR_STATUS_T_INTERNAL = 5,
} smar_status_t;

/**
 * Opaque: item embeddings ready for exact top-k search.
 */
typedef struct smar_index_t smar_index_t;

/**
 * Opaque: a loaded checkpoint plus its vocabulary.
 */
typedef struct smar_model_t smar_model_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Borrowed;
 * valid until the next failing call on the same thread.
 */
const char *smar_last_error(void);

/**
 * ABI version, major*10000 + minor*100 + patch.
 */
uint32_t smar_ffi_version(void);

/**
 * Loads a checkpoint and its vocabulary file into an opaque model handle.
 *
 * # Safety
 * `ckpt_path` and `vocab_path` must be valid NUL-terminated strings;
 * `out_model` must be a valid pointer.
 */
enum smar_status_t smar_model_load(const char *ckpt_path,
                                   const char *vocab_path,
                                   struct smar_model_t **out_model);

/**
 * # Safety
 * `model` must be a pointer returned by [`smar_model_load`], or null.
 */
void smar_model_free(struct smar_model_t *model);

/**
 * Embedding dimension of the loaded model.
 *
 * # Safety
 * `model` must be a valid model handle.
 */
uintptr_t smar_model_dim(const struct smar_model_t *model);

/**
 * Encodes a query into `out_embedding` (length `smar_model_dim`); the
 * vector is L2-normalized.
 *
 * # Safety
 * `model` must be a valid handle, `text` a valid NUL-terminated string, and
 * `out_embedding` writable for `smar_model_dim(model)` doubles.
 */
enum smar_status_t smar_encode_query(const struct smar_model_t *model,
                                     const char *text,
                                     double *out_embedding);

/**
 * Routing decision and header probability for a query. Requires a
 * fine-tuned checkpoint (the header is untrained before that stage).
 *
 * # Safety
 * `model` must be a valid handle, `text` a valid NUL-terminated string;
 * `out_route` and `out_probability` may be null when not wanted.
 */
enum smar_status_t smar_route_query(const struct smar_model_t *model,
                                    const char *text,
                                    enum smar_route_t *out_route,
                                    double *out_probability);

/**
 * Builds an item index from an `items.jsonl` file.
 *
 * # Safety
 * `model` must be a valid handle, `items_jsonl` a valid NUL-terminated path,
 * `out_index` a valid pointer.
 */
enum smar_status_t smar_index_build(const struct smar_model_t *model,
                                    const char *items_jsonl,
                                    enum smar_index_mode_t mode,
                                    uintptr_t threads,
                                    struct smar_index_t **out_index);

/**
 * # Safety
 * `index` must be a pointer returned by [`smar_index_build`], or null.
 */
void smar_index_free(struct smar_index_t *index);

/**
 * Number of items in the index.
 *
 * # Safety
 * `index` must be a valid index handle.
 */
uintptr_t smar_index_len(const struct smar_index_t *index);

/**
 * Borrowed item id for an index row; valid while the index lives. Null when
 * the row is out of range.
 *
 * # Safety
 * `index` must be a valid index handle.
 */
const char *smar_index_item_id(const struct smar_index_t *index, uintptr_t row);

/**
 * Exact top-k search with a caller-provided query embedding. Writes up to
 * `k` (row, score) pairs and the actual count into `out_len`.
 *
 * # Safety
 * `q_embedding` must point to `dim` doubles; `out_rows` and `out_scores`
 * must be writable for `k` entries; `out_len` must be valid.
 */
enum smar_status_t smar_topk(const struct smar_index_t *index,
                             const double *q_embedding,
                             uintptr_t dim,
                             uintptr_t k,
                             uintptr_t *out_len,
                             uintptr_t *out_rows,
                             double *out_scores);

/**
 * Encode-and-search convenience: tokenizes `text`, embeds it, and runs
 * exact top-k against the given index.
 *
 * # Safety
 * Pointer requirements as in [`smar_encode_query`] and [`smar_topk`].
 */
enum smar_status_t smar_search(const struct smar_model_t *model,
                               const struct smar_index_t *index,
                               const char *text,
                               uintptr_t k,
                               uintptr_t *out_len,
                               uintptr_t *out_rows,
                               double *out_scores);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SMAR_H */
