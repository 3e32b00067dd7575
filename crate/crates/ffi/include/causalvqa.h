#ifndef CAUSALVQA_H
#define CAUSALVQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Sampling variant selector for [`cvqa_mar_sample`].
typedef enum CvqaMarVariant {
  CVQA_MAR_VARIANT_MAR16 = 0,
  CVQA_MAR_VARIANT_MAR32 = 1,
} CvqaMarVariant;

// Metric selector for [`cvqa_bank_new`].
typedef enum CvqaMetric {
  CVQA_METRIC_COSINE = 0,
  CVQA_METRIC_L2 = 1,
} CvqaMetric;

// Result of every fallible call.
typedef enum CvqaStatus {
  CVQA_STATUS_OK = 0,
  CVQA_STATUS_NULL_POINTER = 1,
  CVQA_STATUS_INVALID_UTF8 = 2,
  CVQA_STATUS_INVALID_ARGUMENT = 3,
  CVQA_STATUS_CONFIG = 4,
  CVQA_STATUS_IO = 5,
  CVQA_STATUS_FORMAT = 6,
  CVQA_STATUS_DIM_MISMATCH = 7,
  CVQA_STATUS_NON_FINITE = 8,
  CVQA_STATUS_BANK = 9,
  CVQA_STATUS_DIVERGED = 10,
  CVQA_STATUS_BUFFER_TOO_SMALL = 11,
  CVQA_STATUS_PANIC = 12,
} CvqaStatus;

// Opaque scene memory bank.
typedef struct CvqaBank CvqaBank;

// Opaque list of question-answer instances.
typedef struct CvqaDataset CvqaDataset;

// Opaque trained answer model.
typedef struct CvqaModel CvqaModel;

// A moment window over frame indices `[start, end)`.
typedef struct CvqaWindow {
  size_t start;
  size_t end;
  double score;
} CvqaWindow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the calling thread's most recent failure, or null after a
// success. Valid until the next call on this thread.
const char *cvqa_last_error(void);

// Library version as a static string.
const char *cvqa_version(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void cvqa_string_free(char *s);

// Loads a dataset from a feature manifest.
//
// # Safety
// `manifest_path` must be a valid string and `out` a writable pointer.
enum CvqaStatus cvqa_dataset_load(const char *manifest_path, struct CvqaDataset **out);

// Generates a synthetic dataset from a JSON generator spec (`"{}"` gives
// the defaults).
//
// # Safety
// `spec_json` must be a valid string and `out` a writable pointer.
enum CvqaStatus cvqa_dataset_synthetic(const char *spec_json, struct CvqaDataset **out);

// # Safety
// `ds` must be a live dataset handle and `out` writable.
enum CvqaStatus cvqa_dataset_len(const struct CvqaDataset *ds, size_t *out);

// # Safety
// `ds` must be null or a dataset handle not yet freed.
void cvqa_dataset_free(struct CvqaDataset *ds);

// Trains on `ds` with an experiment config given as JSON. The config's
// dataset entry is validated but not loaded; relative paths in it are
// irrelevant here. Writes the model handle and the training metrics as a
// JSON string.
//
// # Safety
// `config_json` must be a valid string, `ds` a live dataset and both out
// pointers writable.
enum CvqaStatus cvqa_train(const char *config_json,
                           const struct CvqaDataset *ds,
                           struct CvqaModel **out_model,
                           char **out_metrics_json);

// # Safety
// `path` must be a valid string and `out` writable.
enum CvqaStatus cvqa_model_load(const char *path, struct CvqaModel **out);

// # Safety
// `model` must be a live handle and `path` a valid string.
enum CvqaStatus cvqa_model_save(const struct CvqaModel *model, const char *path);

// # Safety
// `model` must be null or a model handle not yet freed.
void cvqa_model_free(struct CvqaModel *model);

// Predicted answer index of instance `index` of `ds`.
//
// # Safety
// Both handles must be live and `out` writable.
enum CvqaStatus cvqa_model_predict(const struct CvqaModel *model,
                                   const struct CvqaDataset *ds,
                                   size_t index,
                                   size_t *out);

// Accuracy report of `model` on `ds` as a JSON string.
//
// # Safety
// Both handles must be live and `out_json` writable.
enum CvqaStatus cvqa_evaluate(const struct CvqaModel *model,
                              const struct CvqaDataset *ds,
                              char **out_json);

// Answer-video cosine probe report on `ds` as a JSON string.
//
// # Safety
// `ds` must be live and `out_json` writable.
enum CvqaStatus cvqa_probe(const struct CvqaDataset *ds, char **out_json);

// An empty, unfrozen static bank of `dim`-wide scenes.
//
// # Safety
// `out` must be writable.
enum CvqaStatus cvqa_bank_new(size_t dim, enum CvqaMetric metric, struct CvqaBank **out);

// Adds one scene of `dim` values.
//
// # Safety
// `bank` must be live, `vector` must point to `dim` values and `video_id`
// must be a valid string.
enum CvqaStatus cvqa_bank_push(struct CvqaBank *bank,
                               const double *vector,
                               size_t dim,
                               const char *video_id,
                               size_t clip_index);

// Adds every clip of every instance of `ds`.
//
// # Safety
// Both handles must be live.
enum CvqaStatus cvqa_bank_add_dataset(struct CvqaBank *bank, const struct CvqaDataset *ds);

// Freezes the bank; further pushes fail.
//
// # Safety
// `bank` must be live.
enum CvqaStatus cvqa_bank_freeze(struct CvqaBank *bank);

// # Safety
// `bank` must be live and `out` writable.
enum CvqaStatus cvqa_bank_len(const struct CvqaBank *bank, size_t *out);

// # Safety
// `bank` must be null or a bank handle not yet freed.
void cvqa_bank_free(struct CvqaBank *bank);

// Exact `k` nearest scenes to `query`, best first. Writes `k` entry
// indices and scores (cosine similarity, or squared distance for L2).
// `exclude_video_id` may be null.
//
// # Safety
// `bank` must be live, `query` must point to `dim` values, `out_indices`
// and `out_scores` must each have room for `k` values.
enum CvqaStatus cvqa_bank_knn(const struct CvqaBank *bank,
                              const double *query,
                              size_t dim,
                              size_t k,
                              const char *exclude_video_id,
                              size_t *out_indices,
                              double *out_scores);

// Cosine similarity of two `n`-vectors. When either has zero norm the
// value is 0 and `out_degenerate` (which may be null) is set to 1.
//
// # Safety
// `a` and `b` must point to `n` values, `out` must be writable and
// `out_degenerate` must be null or writable.
enum CvqaStatus cvqa_cosine(const double *a,
                            const double *b,
                            size_t n,
                            double *out,
                            uint8_t *out_degenerate);

// InfoNCE loss of an anchor, a positive and `n_negatives` negatives, all
// `dim`-wide; `negatives` is row-major `n_negatives × dim`.
//
// # Safety
// `anchor` and `positive` must point to `dim` values, `negatives` to
// `n_negatives * dim` values and `out_loss` must be writable.
enum CvqaStatus cvqa_infonce(const double *anchor,
                             const double *positive,
                             const double *negatives,
                             size_t n_negatives,
                             size_t dim,
                             double *out_loss);

// Saliency-window frame sampling over `n_frames` frames. Writes the
// ascending frame indices into `out_indices` (capacity `capacity`) and
// their number into `out_len`.
//
// # Safety
// `windows` must point to `n_windows` entries, `out_indices` to `capacity`
// writable values and `out_len` must be writable.
enum CvqaStatus cvqa_mar_sample(size_t n_frames,
                                const struct CvqaWindow *windows,
                                size_t n_windows,
                                enum CvqaMarVariant variant,
                                uint64_t seed,
                                size_t *out_indices,
                                size_t capacity,
                                size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSALVQA_H */
