#ifndef TRAJATTR_H
#define TRAJATTR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Which influence estimator to run.
typedef enum TrajattrEstimator {
  TRAJATTR_ESTIMATOR_SGD = 0,
  TRAJATTR_ESTIMATOR_ADAMW = 1,
} TrajattrEstimator;

// Result code of every fallible call.
typedef enum TrajattrStatus {
  TRAJATTR_STATUS_OK = 0,
  TRAJATTR_STATUS_NULL_POINTER = 1,
  TRAJATTR_STATUS_INVALID_INPUT = 2,
  TRAJATTR_STATUS_UNDEFINED_CORRELATION = 3,
  TRAJATTR_STATUS_FORMAT = 4,
  TRAJATTR_STATUS_NUMERIC = 5,
  TRAJATTR_STATUS_DETERMINISM = 6,
  TRAJATTR_STATUS_INVALID_CONFIG = 7,
  TRAJATTR_STATUS_DEPENDENCY = 8,
  TRAJATTR_STATUS_IO = 9,
  TRAJATTR_STATUS_BUFFER_TOO_SMALL = 10,
  TRAJATTR_STATUS_PANIC = 11,
} TrajattrStatus;

// A labelled dataset.
typedef struct TrajattrDataset TrajattrDataset;

// A recorded training run with per-step checkpoints.
typedef struct TrajattrRun TrajattrRun;

// Scores keyed by (step, sample), one value per key.
typedef struct TrajattrScores TrajattrScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call into the library from this thread.
const char *trajattr_last_error(void);

// Library version as a static NUL-terminated string.
const char *trajattr_version(void);

// Dataset from row-major `features` (`n × d`) and `labels` (`n`).
//
// # Safety
// `features` must point to `n * d` doubles, `labels` to `n` values and
// `out` to writable storage for one pointer.
enum TrajattrStatus trajattr_dataset_new(const double *features,
                                         const uint32_t *labels,
                                         size_t n,
                                         size_t d,
                                         size_t num_classes,
                                         struct TrajattrDataset **out);

// Seeded Gaussian-blob dataset.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum TrajattrStatus trajattr_dataset_blobs(size_t n,
                                           size_t d,
                                           size_t num_classes,
                                           double spread,
                                           uint64_t seed,
                                           struct TrajattrDataset **out);

// Number of samples, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live dataset handle.
size_t trajattr_dataset_len(const struct TrajattrDataset *data);

// # Safety
// `data` must be NULL or a handle not yet freed.
void trajattr_dataset_free(struct TrajattrDataset *data);

// Train on `data` with the model, optimizer, mask and seed sections of a
// TOML experiment config (NULL or empty for defaults), keeping checkpoints.
//
// # Safety
// `data` must be a live dataset, `config_toml` NULL or a NUL-terminated
// UTF-8 string, and `out` writable storage for one pointer.
enum TrajattrStatus trajattr_train(const struct TrajattrDataset *data,
                                   const char *config_toml,
                                   struct TrajattrRun **out);

// Number of optimizer steps, or 0 for NULL.
//
// # Safety
// `run` must be NULL or a live run handle.
size_t trajattr_run_num_steps(const struct TrajattrRun *run);

// Number of model parameters, or 0 for NULL.
//
// # Safety
// `run` must be NULL or a live run handle.
size_t trajattr_run_param_count(const struct TrajattrRun *run);

// Copy the final parameters into `out` (capacity `cap`).
//
// # Safety
// `run` must be a live run handle and `out` point to `cap` doubles.
enum TrajattrStatus trajattr_run_theta_final(const struct TrajattrRun *run,
                                             double *out,
                                             size_t cap);

// Score every (step, sample) occurrence of the run against the mean
// validation-loss gradient over `val`. Positive scores mark samples whose
// removal is predicted to raise validation loss.
//
// # Safety
// `run` and `val` must be live handles, `out` writable storage for one
// pointer.
enum TrajattrStatus trajattr_attribute(const struct TrajattrRun *run,
                                       enum TrajattrEstimator estimator,
                                       const struct TrajattrDataset *val,
                                       struct TrajattrScores **out);

// Number of scored (step, sample) pairs, or 0 for NULL.
//
// # Safety
// `scores` must be NULL or a live scores handle.
size_t trajattr_scores_len(const struct TrajattrScores *scores);

// Entry `i`: its step, sample id and score.
//
// # Safety
// `scores` must be a live handle; the out pointers must be writable.
enum TrajattrStatus trajattr_scores_get(const struct TrajattrScores *scores,
                                        size_t i,
                                        size_t *step,
                                        size_t *sample,
                                        double *score);

// # Safety
// `scores` must be NULL or a handle not yet freed.
void trajattr_scores_free(struct TrajattrScores *scores);

// Retrain without `sample` at `step` and report the mean change in
// validation loss over `val`.
//
// # Safety
// `run` and `val` must be live handles and `out` writable.
enum TrajattrStatus trajattr_tsloo(const struct TrajattrRun *run,
                                   size_t sample,
                                   size_t step,
                                   const struct TrajattrDataset *val,
                                   double *out);

// # Safety
// `run` must be NULL or a handle not yet freed.
void trajattr_run_free(struct TrajattrRun *run);

// Spearman rank correlation with average ranks for ties.
//
// # Safety
// `x` and `y` must each point to `n` doubles and `out` must be writable.
enum TrajattrStatus trajattr_spearman(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJATTR_H */
