/* Generated by cbindgen; do not edit. */

#ifndef CONFORMAL_DECODE_H
#define CONFORMAL_DECODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_NULL_POINTER = 1,
  CD_STATUS_INVALID_ARGUMENT = 2,
  CD_STATUS_INVALID_DATA = 3,
  CD_STATUS_IO = 4,
  CD_STATUS_BUFFER_TOO_SMALL = 5,
  CD_STATUS_PANIC = 6,
  CD_STATUS_INTERNAL = 7,
} CdStatus;

/**
 * Validated set of distribution records.
 */
typedef struct CdDataset CdDataset;

/**
 * Fitted calibration thresholds.
 */
typedef struct CdModel CdModel;

/**
 * Outcome of one decoding step.
 */
typedef struct CdStep {
  size_t token;
  size_t set_size;
  double cum_mass;
  double entropy;
  double qhat;
  /**
   * Entropy bin used, or -1 for a global model.
   */
  int64_t bin;
} CdStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *cd_last_error_message(void);

/**
 * Reads a JSONL record file. With `strict` false, invalid rows are dropped.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CdStatus cd_dataset_read(const char *path, bool strict, struct CdDataset **out);

/**
 * Builds a dataset from `n_records` dense rows of `vocab_size` probabilities
 * each (row-major) and one gold token per row. Row `i` gets key `(i, 0)`.
 *
 * # Safety
 * `probs` must hold `n_records * vocab_size` values and `gold` `n_records`.
 */
enum CdStatus cd_dataset_from_dense(const double *probs,
                                    const size_t *gold,
                                    size_t n_records,
                                    size_t vocab_size,
                                    struct CdDataset **out);

/**
 * Number of records, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cd_dataset_len(const struct CdDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void cd_dataset_free(struct CdDataset *ds);

/**
 * Fits thresholds at miscoverage `alpha` with `num_bins` entropy bins
 * (1 for a single global threshold).
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum CdStatus cd_model_fit(const struct CdDataset *ds,
                           double alpha,
                           size_t num_bins,
                           struct CdModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

/**
 * Writes the model as JSON, atomically.
 *
 * # Safety
 * `m` must be a live handle; `path` a NUL-terminated string.
 */
enum CdStatus cd_model_save(const struct CdModel *m, const char *path);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void cd_model_free(struct CdModel *m);

/**
 * Number of thresholds, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t cd_model_num_bins(const struct CdModel *m);

/**
 * Threshold of bin `bin`.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum CdStatus cd_model_qhat(const struct CdModel *m, size_t bin, double *out);

/**
 * Fraction of `test` records whose gold token lands in its calibrated set.
 *
 * # Safety
 * `m` and `test` must be live handles; `out` must be writable.
 */
enum CdStatus cd_coverage(const struct CdModel *m, const struct CdDataset *test, double *out);

/**
 * Nonconformity score of `gold`: the total mass of tokens at least as likely.
 *
 * # Safety
 * `probs` must hold `len` values; `out` must be writable.
 */
enum CdStatus cd_aps_score(const double *probs, size_t len, size_t gold, double *out);

/**
 * Finite-sample conformal quantile of `n` scores at miscoverage `alpha`.
 *
 * # Safety
 * `scores` must hold `n` values; `out` must be writable.
 */
enum CdStatus cd_conformal_quantile(const double *scores, size_t n, double alpha, double *out);

/**
 * Top-p set: the shortest most-probable prefix whose mass reaches `q`.
 * Token ids go to `out_ids` in descending probability. When `capacity` is
 * too small the call fails with `BUFFER_TOO_SMALL` and `out_len` holds the
 * size needed. `out_mass` may be null.
 *
 * # Safety
 * `probs` must hold `len` values, `out_ids` `capacity` slots; `out_len` must
 * be writable.
 */
enum CdStatus cd_prediction_set(const double *probs,
                                size_t len,
                                double q,
                                size_t *out_ids,
                                size_t capacity,
                                size_t *out_len,
                                double *out_mass);

/**
 * Calibrated set: every token whose score is at most `q`, or the top token
 * alone when none is. Buffers as in [`cd_prediction_set`].
 *
 * # Safety
 * As for [`cd_prediction_set`].
 */
enum CdStatus cd_conformal_set(const double *probs,
                               size_t len,
                               double q,
                               size_t *out_ids,
                               size_t capacity,
                               size_t *out_len,
                               double *out_mass);

/**
 * One calibrated decoding step; the same `seed` always picks the same token.
 *
 * # Safety
 * `m` must be a live handle, `probs` must hold `len` values and `out` must be
 * writable.
 */
enum CdStatus cd_decode_step(const struct CdModel *m,
                             const double *probs,
                             size_t len,
                             uint64_t seed,
                             struct CdStep *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFORMAL_DECODE_H */
