#ifndef REPPL_H
#define REPPL_H

/* Generated by cbindgen; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Per-token arrays held by a score handle.
 */
typedef enum RepplField {
  REPPL_FIELD_INPUT_CV = 0,
  REPPL_FIELD_INPUT_PSEUDO_CONF = 1,
  REPPL_FIELD_INPUT_IMPORTANCE = 2,
  REPPL_FIELD_OUTPUT_LOGPROBS = 3,
} RepplField;

/**
 * Values accepted in [`RepplConfig::pool`].
 */
typedef enum RepplPool {
  REPPL_POOL_MAX = 0,
  REPPL_POOL_AVG = 1,
  REPPL_POOL_ROLL = 2,
} RepplPool;

typedef enum RepplStatus {
  REPPL_STATUS_OK = 0,
  REPPL_STATUS_NULL_POINTER = 1,
  REPPL_STATUS_INVALID_UTF8 = 2,
  REPPL_STATUS_IO = 3,
  REPPL_STATUS_FORMAT = 4,
  REPPL_STATUS_INVARIANT = 5,
  REPPL_STATUS_MISSING_FIELD = 6,
  REPPL_STATUS_EMPTY_GENERATION = 7,
  REPPL_STATUS_DEGENERATE_LABELS = 8,
  REPPL_STATUS_DEGENERATE_QUALITY = 9,
  REPPL_STATUS_NUMERICAL = 10,
  REPPL_STATUS_INVALID_ARGUMENT = 11,
  REPPL_STATUS_OUT_OF_RANGE = 12,
  REPPL_STATUS_BUFFER_TOO_SMALL = 13,
  REPPL_STATUS_PANIC = 14,
} RepplStatus;

/**
 * Loaded traces.
 */
typedef struct RepplDataset RepplDataset;

/**
 * Token-level uncertainty of one example.
 */
typedef struct RepplScore RepplScore;

typedef struct RepplConfig {
  double alpha;
  double epsilon;
  /**
   * One of the `RepplPool` values.
   */
  int32_t pool;
  double cv_mean_floor;
} RepplConfig;

typedef struct RepplScoreSummary {
  double inner_ppl;
  double outer_ppl;
  double reppl;
  size_t input_len;
  size_t output_len;
} RepplScoreSummary;

typedef struct RepplEvalResult {
  double auc;
  double acc_gmean;
  double threshold_at_max_gmean;
  double spearman;
  double prr;
} RepplEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *reppl_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call on the same thread.
 */
const char *reppl_last_error_message(void);

/**
 * # Safety
 * `out` must point to writable memory for one `RepplConfig`.
 */
enum RepplStatus reppl_config_default(struct RepplConfig *out);

/**
 * Loads and validates every record of a dataset directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RepplStatus reppl_dataset_open(const char *path, struct RepplDataset **out);

/**
 * The bundled eight-example synthetic dataset.
 *
 * # Safety
 * `out` must be writable.
 */
enum RepplStatus reppl_dataset_fixture(struct RepplDataset **out);

/**
 * # Safety
 * `ds` must be a handle from this library, not yet freed, or NULL.
 */
void reppl_dataset_free(struct RepplDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; `out_len` must be writable.
 */
enum RepplStatus reppl_dataset_len(const struct RepplDataset *ds, size_t *out_len);

/**
 * Copies the example id (UTF-8, NUL-terminated) into `buf`. `out_len`
 * receives the id length in bytes excluding the terminator.
 *
 * # Safety
 * `ds` must be a live handle; `buf` must hold `cap` bytes.
 */
enum RepplStatus reppl_dataset_example_id(const struct RepplDataset *ds,
                                          size_t index,
                                          char *buf,
                                          size_t cap,
                                          size_t *out_len);

/**
 * Scores one example.
 *
 * # Safety
 * `ds` must be a live handle, `cfg` a valid config pointer and `out`
 * writable.
 */
enum RepplStatus reppl_score_example(const struct RepplDataset *ds,
                                     size_t index,
                                     const struct RepplConfig *cfg,
                                     struct RepplScore **out);

/**
 * # Safety
 * `score` must be a handle from this library, not yet freed, or NULL.
 */
void reppl_score_free(struct RepplScore *score);

/**
 * # Safety
 * `score` must be a live handle; `out` must be writable.
 */
enum RepplStatus reppl_score_summary(const struct RepplScore *score, struct RepplScoreSummary *out);

/**
 * Copies one per-token array of a score.
 *
 * # Safety
 * `score` must be a live handle; `buf` must hold `cap` doubles.
 */
enum RepplStatus reppl_score_copy(const struct RepplScore *score,
                                  int32_t field,
                                  double *buf,
                                  size_t cap,
                                  size_t *out_len);

/**
 * RePPL of every example, in dataset order. Values are non-positive and
 * more negative for hallucinations; negate them before [`reppl_auc`].
 *
 * # Safety
 * `ds` and `cfg` must be valid; `buf` must hold `cap` doubles.
 */
enum RepplStatus reppl_score_dataset(const struct RepplDataset *ds,
                                     const struct RepplConfig *cfg,
                                     double *buf,
                                     size_t cap,
                                     size_t *out_len);

/**
 * AUC of `scores` (larger = more hallucinated) against `labels`
 * (non-zero = hallucinated).
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum RepplStatus reppl_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * All metrics with quality taken as `1 − label`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum RepplStatus reppl_evaluate(const double *scores,
                                const uint8_t *labels,
                                size_t n,
                                struct RepplEvalResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPPL_H */
