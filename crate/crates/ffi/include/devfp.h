/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DEVFP_H
#define DEVFP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DEVFP_AXIS_ENGINE = 0,
  DEVFP_AXIS_BACKEND = 1,
  DEVFP_AXIS_HARDWARE = 2,
} DevfpAxis;

typedef enum {
  DEVFP_REDUCTION_SEQUENTIAL = 0,
  DEVFP_REDUCTION_REVERSED = 1,
  DEVFP_REDUCTION_PAIRWISE = 2,
  /**
   * Uses the `tile` argument.
   */
  DEVFP_REDUCTION_BLOCKED = 3,
  DEVFP_REDUCTION_KAHAN = 4,
} DevfpReduction;

typedef enum {
  DEVFP_STATUS_OK = 0,
  DEVFP_STATUS_NULL_POINTER = 1,
  DEVFP_STATUS_INVALID_ARGUMENT = 2,
  DEVFP_STATUS_INVALID_UTF8 = 3,
  DEVFP_STATUS_UNKNOWN_CONFIG = 4,
  DEVFP_STATUS_BUFFER_TOO_SMALL = 5,
  DEVFP_STATUS_IO = 6,
  DEVFP_STATUS_FAILED = 7,
  DEVFP_STATUS_PANIC = 8,
} DevfpStatus;

/**
 * Labelled feature vectors accumulated from collections.
 */
typedef struct DevfpDataset DevfpDataset;

/**
 * A trained random forest for one axis.
 */
typedef struct DevfpForest DevfpForest;

/**
 * A prompt suite.
 */
typedef struct DevfpSuite DevfpSuite;

/**
 * One simulated inference system.
 */
typedef struct DevfpSystem DevfpSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf`. Returns the
 * message length plus one (the size needed), or 1 when there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t devfp_last_error(char *buf, size_t len);

/**
 * Number of valid system configs in the built-in zoo.
 */
size_t devfp_zoo_len(void);

/**
 * Writes the id (`ENGINE/BACKEND/HARDWARE`) of config `index`.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes; `needed` null or writable.
 */
DevfpStatus devfp_zoo_config(size_t index, char *buf, size_t len, size_t *needed);

/**
 * Sum of `n` values under a reduction order with a 32-bit accumulator.
 *
 * # Safety
 * `values` must be valid for `n` floats; `out` writable.
 */
DevfpStatus devfp_reduce(const float *values,
                         size_t n,
                         DevfpReduction strategy,
                         size_t tile,
                         float *out);

/**
 * `tr(AᵀB)` for `n×n` constant matrices. `wide` selects a 64-bit
 * accumulator.
 *
 * # Safety
 * `out` must be writable.
 */
DevfpStatus devfp_trace_demo(size_t n,
                             float a,
                             float b,
                             DevfpReduction strategy,
                             size_t tile,
                             bool wide,
                             float *out);

/**
 * Generates a margin-targeted suite against every zoo system.
 *
 * # Safety
 * `out` must be writable.
 */
DevfpStatus devfp_suite_generate(size_t p1,
                                 size_t p2,
                                 size_t p3,
                                 size_t p4,
                                 uint64_t seed,
                                 uint64_t model_seed,
                                 DevfpSuite **out);

/**
 * Reads a JSON Lines suite.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
DevfpStatus devfp_suite_load(const char *path, DevfpSuite **out);

/**
 * # Safety
 * `suite` must be a live handle; `path` a NUL-terminated string.
 */
DevfpStatus devfp_suite_save(const DevfpSuite *suite, const char *path);

/**
 * Number of prompts, or 0 for a null handle.
 *
 * # Safety
 * `suite` must be null or a live handle.
 */
size_t devfp_suite_len(const DevfpSuite *suite);

/**
 * # Safety
 * `suite` must be null or a handle not yet freed.
 */
void devfp_suite_free(DevfpSuite *suite);

/**
 * Instantiates config `id` over the model of `model_seed`, with logit
 * noise `sigma` (0 for none).
 *
 * # Safety
 * `id` must be a NUL-terminated string; `out` writable.
 */
DevfpStatus devfp_system_new(const char *id, uint64_t model_seed, float sigma, DevfpSystem **out);

/**
 * # Safety
 * `system` must be null or a handle not yet freed.
 */
void devfp_system_free(DevfpSystem *system);

/**
 * # Safety
 * `out` must be writable.
 */
DevfpStatus devfp_dataset_new(DevfpDataset **out);

/**
 * Queries `system` for replicates `first..first+count` of every prompt
 * and appends the labelled feature vectors to `dataset`.
 *
 * # Safety
 * All handles must be live.
 */
DevfpStatus devfp_dataset_collect(DevfpDataset *dataset,
                                  const DevfpSystem *system,
                                  const DevfpSuite *suite,
                                  float temperature,
                                  uint64_t seed,
                                  uint64_t first,
                                  uint64_t count,
                                  size_t batch_size);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t devfp_dataset_len(const DevfpDataset *dataset);

/**
 * Writes the dataset as CSV.
 *
 * # Safety
 * `dataset` must be a live handle; `path` a NUL-terminated string.
 */
DevfpStatus devfp_dataset_save(const DevfpDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void devfp_dataset_free(DevfpDataset *dataset);

/**
 * Trains a forest of `n_trees` trees for `axis`.
 *
 * # Safety
 * `dataset` must be a live handle; `out` writable.
 */
DevfpStatus devfp_forest_train(const DevfpDataset *dataset,
                               DevfpAxis axis,
                               size_t n_trees,
                               uint64_t seed,
                               DevfpForest **out);

/**
 * Serialises the forest as JSON into `buf`.
 *
 * # Safety
 * `forest` must be a live handle; `buf` null or valid for `len` bytes;
 * `needed` null or writable.
 */
DevfpStatus devfp_forest_to_json(const DevfpForest *forest, char *buf, size_t len, size_t *needed);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` writable.
 */
DevfpStatus devfp_forest_from_json(const char *json, DevfpForest **out);

/**
 * # Safety
 * `forest` must be null or a handle not yet freed.
 */
void devfp_forest_free(DevfpForest *forest);

/**
 * Queries `target` `k` times and writes the forest's majority label.
 *
 * # Safety
 * All handles must be live; `buf` null or valid for `len` bytes; `needed`
 * null or writable.
 */
DevfpStatus devfp_fingerprint(const DevfpSystem *target,
                              const DevfpSuite *suite,
                              const DevfpForest *forest,
                              size_t k,
                              float temperature,
                              uint64_t seed,
                              char *buf,
                              size_t len,
                              size_t *needed);

/**
 * Runs an experiment (`closed-world`, `k-sweep`, ...) with its defaults
 * overlaid by `spec_json` (may be null) and writes its CSV, JSON and plot
 * files under `out_dir`.
 *
 * # Safety
 * `name` and `out_dir` must be NUL-terminated strings; `spec_json` null or
 * NUL-terminated.
 */
DevfpStatus devfp_run_experiment(const char *name, const char *spec_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEVFP_H */
