#ifndef STZERO_H
#define STZERO_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum StzStatus {
  STZ_STATUS_OK = 0,
  STZ_STATUS_NULL_ARGUMENT = 1,
  STZ_STATUS_INVALID_ARGUMENT = 2,
  STZ_STATUS_DIMENSION = 3,
  STZ_STATUS_CONTRACT = 4,
  STZ_STATUS_NUMERIC = 5,
  STZ_STATUS_DATA = 6,
  STZ_STATUS_CONFIG = 7,
  STZ_STATUS_IO = 8,
  STZ_STATUS_CORRUPTION = 9,
  STZ_STATUS_LOOKUP = 10,
  STZ_STATUS_BUFFER_TOO_SMALL = 11,
  STZ_STATUS_PANIC = 12,
} StzStatus;

/**
 * Gene split selector for evaluation.
 */
typedef enum StzSplit {
  STZ_SPLIT_SEEN = 0,
  STZ_SPLIT_UNSEEN = 1,
  STZ_SPLIT_ALL = 2,
} StzSplit;

/**
 * Opaque dataset handle.
 */
typedef struct StzDataset StzDataset;

/**
 * Opaque model handle, including optimizer state.
 */
typedef struct StzModel StzModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t stz_last_error(char *buf, size_t len);

/**
 * Generates a synthetic dataset. `config_json` holds any subset of the
 * generator fields (`n_slides`, `windows_per_slide`, `n_genes`, `n_seen`,
 * `d_e`, `d_t`, `l`, `d_latent`, `noise_sigma`, `seed`); null uses defaults.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum StzStatus stz_dataset_synth(const char *config_json, struct StzDataset **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be valid.
 */
enum StzStatus stz_dataset_load(const char *dir, struct StzDataset **out);

/**
 * # Safety
 * `ds` must come from this library; `dir` must be a NUL-terminated path.
 */
enum StzStatus stz_dataset_save(const struct StzDataset *ds, const char *dir);

/**
 * Writes the slide count, the gene count, and the window count of slide
 * `slide` (any output pointer may be null).
 *
 * # Safety
 * `ds` must come from this library; non-null outputs must be valid.
 */
enum StzStatus stz_dataset_shape(const struct StzDataset *ds,
                                 size_t slide,
                                 size_t *n_slides,
                                 size_t *n_genes,
                                 size_t *n_windows);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not used afterwards.
 */
void stz_dataset_free(struct StzDataset *ds);

/**
 * Trains a fresh model. `config_json` holds any subset of the training
 * configuration fields; null uses defaults.
 *
 * # Safety
 * `ds` must come from this library; `config_json` must be null or a
 * NUL-terminated string; `out` must be valid.
 */
enum StzStatus stz_model_train(const struct StzDataset *ds,
                               const char *config_json,
                               struct StzModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated path; `out` must be valid.
 */
enum StzStatus stz_model_load(const char *path, struct StzModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated path.
 */
enum StzStatus stz_model_save(const struct StzModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle from this library, not used afterwards.
 */
void stz_model_free(struct StzModel *model);

/**
 * Evaluates on a split and returns the report as a JSON string, released
 * with [`stz_string_free`].
 *
 * # Safety
 * Handles must come from this library; `out_json` must be valid.
 */
enum StzStatus stz_model_eval(const struct StzModel *model,
                              const struct StzDataset *ds,
                              enum StzSplit split,
                              char **out_json);

/**
 * Writes predictions for gene index `gene` on slide index `slide` into
 * `out[0..n_windows]`. Fails with `BufferTooSmall` if `len < n_windows`.
 *
 * # Safety
 * Handles must come from this library; `out` must be valid for `len` doubles.
 */
enum StzStatus stz_model_predict(const struct StzModel *model,
                                 const struct StzDataset *ds,
                                 size_t slide,
                                 size_t gene,
                                 double *out,
                                 size_t len);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not used afterwards.
 */
void stz_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STZERO_H */
