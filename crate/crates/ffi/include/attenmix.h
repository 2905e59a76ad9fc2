#ifndef ATTENMIX_H
#define ATTENMIX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AtmxStatus {
  ATMX_STATUS_OK = 0,
  ATMX_STATUS_NULL_POINTER = 1,
  ATMX_STATUS_INVALID_ARGUMENT = 2,
  ATMX_STATUS_IO = 3,
  ATMX_STATUS_CORRUPT_CHECKPOINT = 4,
  ATMX_STATUS_VERSION_MISMATCH = 5,
  ATMX_STATUS_UNKNOWN_ITEM = 6,
  ATMX_STATUS_BUFFER_TOO_SMALL = 7,
  ATMX_STATUS_INTERNAL = 8,
} AtmxStatus;

/**
 * Opaque loaded model.
 */
typedef struct AtmxModel AtmxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next attenmix call on this thread.
 */
const char *atmx_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a model to be released with
 * [`atmx_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AtmxStatus atmx_model_load(const char *path, struct AtmxModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`atmx_model_load`] and not be freed twice.
 */
void atmx_model_free(struct AtmxModel *model);

/**
 * Vocabulary size, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t atmx_model_num_items(const struct AtmxModel *model);

/**
 * Embedding width, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t atmx_model_dim(const struct AtmxModel *model);

/**
 * Dense index of an external item id.
 *
 * # Safety
 * `model` must be a live model, `id` NUL-terminated and `out` valid.
 */
enum AtmxStatus atmx_item_index(const struct AtmxModel *model, const char *id, uint32_t *out);

/**
 * Copies the external id of `index` into `buf` with a trailing NUL. `*len`
 * receives the id length without the NUL, also when `buf` is too small.
 *
 * # Safety
 * `model` must be a live model, `buf` valid for `cap` bytes (or null with
 * `cap == 0`) and `len` valid.
 */
enum AtmxStatus atmx_item_id(const struct AtmxModel *model,
                             uint32_t index,
                             char *buf,
                             size_t cap,
                             size_t *len);

/**
 * Next-item probabilities for a session: `probs[i]` is item `i + 1`.
 * `cap` must be at least [`atmx_model_num_items`].
 *
 * # Safety
 * `items` must hold `n` indices and `probs` be valid for `cap` doubles.
 */
enum AtmxStatus atmx_score_session(const struct AtmxModel *model,
                                   const uint32_t *items,
                                   size_t n,
                                   double *probs,
                                   size_t cap);

/**
 * Top-`k` items, best first, ties to the smaller index. Writes
 * `min(k, num_items)` entries and their count to `*written`.
 *
 * # Safety
 * `items` must hold `n` indices; `out_items` and `out_scores` must be valid
 * for `k` entries; `written` must be valid.
 */
enum AtmxStatus atmx_recommend(const struct AtmxModel *model,
                               const uint32_t *items,
                               size_t n,
                               size_t k,
                               uint32_t *out_items,
                               double *out_scores,
                               size_t *written);

/**
 * HR@k and MRR@k of 1-based ranks.
 *
 * # Safety
 * `ranks` must hold `n` values; `hr` and `mrr` must be valid.
 */
enum AtmxStatus atmx_hr_mrr(const size_t *ranks, size_t n, size_t k, double *hr, double *mrr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTENMIX_H */
