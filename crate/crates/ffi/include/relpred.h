#ifndef RELPRED_H
#define RELPRED_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RpSplit {
  RP_SPLIT_VALID = 0,
  RP_SPLIT_TEST = 1,
} RpSplit;

typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_POINTER = 1,
  RP_STATUS_INVALID_STRING = 2,
  RP_STATUS_IO = 3,
  RP_STATUS_PARSE = 4,
  RP_STATUS_EMPTY_INPUT = 5,
  RP_STATUS_OUT_OF_VOCABULARY = 6,
  RP_STATUS_INDEX_OUT_OF_RANGE = 7,
  RP_STATUS_SHAPE = 8,
  RP_STATUS_NUMERIC = 9,
  RP_STATUS_CONFIG = 10,
  RP_STATUS_CHECKPOINT = 11,
  RP_STATUS_GRID_SEARCH = 12,
  RP_STATUS_BUFFER_TOO_SMALL = 13,
  RP_STATUS_PANIC = 14,
} RpStatus;

/**
 * Train/valid/test splits indexed against the training vocabulary.
 */
typedef struct RpDataset RpDataset;

/**
 * Trained parameters together with the vocabulary they were trained on.
 */
typedef struct RpModel RpModel;

typedef struct RpHyperparams {
  size_t d;
  size_t k;
  size_t epochs;
  size_t batch_size;
  double dropout_rate;
  double l2_coefficient;
  double learning_rate;
  uint64_t seed;
} RpHyperparams;

/**
 * Hits@N over the split. `num_triples` includes out-of-vocabulary triples,
 * which count as misses.
 */
typedef struct RpMetrics {
  double hits_at_1;
  double hits_at_3;
  double hits_at_5;
  double hits_at_10;
  size_t num_triples;
  size_t skipped_oov;
} RpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rp_version(void);

/**
 * Message for the most recent failure on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *rp_last_error_message(void);

/**
 * Loads `train.txt`, `valid.txt` and `test.txt` from `dir`. With
 * `skip_oov` false, evaluation triples with unseen labels are an error.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RpStatus rp_dataset_load(const char *dir, bool skip_oov, struct RpDataset **out);

/**
 * # Safety
 * `dataset` must come from [`rp_dataset_load`] and not be freed twice.
 */
void rp_dataset_free(struct RpDataset *dataset);

/**
 * 0 for a NULL handle.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t rp_dataset_num_entities(const struct RpDataset *dataset);

/**
 * 0 for a NULL handle.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t rp_dataset_num_relations(const struct RpDataset *dataset);

/**
 * Number of training entity pairs linked by two or more relations.
 *
 * # Safety
 * `dataset` must be a live handle and `out` writable.
 */
enum RpStatus rp_dataset_multi_relation_pairs(const struct RpDataset *dataset, size_t *out);

struct RpHyperparams rp_hyperparams_default(void);

/**
 * Trains a model on the dataset's training split.
 *
 * # Safety
 * `dataset` and `hyper` must be valid pointers and `out` writable.
 */
enum RpStatus rp_model_train(const struct RpDataset *dataset,
                             const struct RpHyperparams *hyper,
                             struct RpModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum RpStatus rp_model_save(const struct RpModel *model, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum RpStatus rp_model_load(const char *path, struct RpModel **out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void rp_model_free(struct RpModel *model);

/**
 * 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t rp_model_num_relations(const struct RpModel *model);

/**
 * Label of relation `index`, or NULL when out of range. Owned by the model.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
const char *rp_model_relation_label(const struct RpModel *model, size_t index);

/**
 * Writes one probability per relation, indexed by relation id, into
 * `scores`. `len` must be at least [`rp_model_num_relations`].
 *
 * # Safety
 * `model` must be a live handle, the labels NUL-terminated strings, and
 * `scores` valid for `len` writes.
 */
enum RpStatus rp_model_predict(const struct RpModel *model,
                               const char *subject,
                               const char *object,
                               double *scores,
                               size_t len);

/**
 * Hits@{1,3,5,10} of `model` on one split of `dataset`. `split` is an
 * [`RpSplit`] value. The dataset must have been loaded with the vocabulary
 * the model was trained on.
 *
 * # Safety
 * `model` and `dataset` must be live handles and `out` writable.
 */
enum RpStatus rp_model_evaluate(const struct RpModel *model,
                                const struct RpDataset *dataset,
                                uint32_t split,
                                struct RpMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELPRED_H */
