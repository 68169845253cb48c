#ifndef FDREC_H
#define FDREC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FdrecPartition {
  FDREC_PARTITION_TRAIN = 0,
  FDREC_PARTITION_VALID = 1,
  FDREC_PARTITION_TEST = 2,
} FdrecPartition;

/**
 * Which candidate protocol to evaluate.
 */
typedef enum FdrecProtocol {
  FDREC_PROTOCOL_REPEAT = 0,
  FDREC_PROTOCOL_EXPLORATION = 1,
  FDREC_PROTOCOL_COMBINED = 2,
} FdrecProtocol;

/**
 * Result code of every fallible call.
 */
typedef enum FdrecStatus {
  FDREC_STATUS_OK = 0,
  FDREC_STATUS_NULL_POINTER = 1,
  FDREC_STATUS_INVALID_UTF8 = 2,
  FDREC_STATUS_INVALID_ARGUMENT = 3,
  FDREC_STATUS_IO = 4,
  FDREC_STATUS_PARSE = 5,
  FDREC_STATUS_CONFIG = 6,
  FDREC_STATUS_CHECKPOINT = 7,
  FDREC_STATUS_UNSUPPORTED = 8,
  FDREC_STATUS_INTERNAL = 9,
} FdrecStatus;

/**
 * An encoded, filtered and split interaction log.
 */
typedef struct FdrecDataset FdrecDataset;

/**
 * A scorer bound to the vocabulary of the dataset it was loaded with.
 */
typedef struct FdrecModel FdrecModel;

/**
 * Mean ranking metrics over `n` cases.
 */
typedef struct FdrecMetrics {
  double hr;
  double ndcg;
  size_t n;
} FdrecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none failed.
 * Valid until the next fdrec call on the same thread.
 */
const char *fdrec_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fdrec_version(void);

/**
 * Load the dataset described by a config file (paths relative to it).
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out` must be writable.
 */
enum FdrecStatus fdrec_dataset_open(const char *config_path, struct FdrecDataset **out);

/**
 * Generate a synthetic dataset from config text (its `[synth]` and `[data]`
 * sections are used) and `seed`.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum FdrecStatus fdrec_dataset_synthetic(const char *config_toml,
                                         uint64_t seed,
                                         struct FdrecDataset **out);

/**
 * # Safety
 * `ds` must come from a dataset constructor and not be used afterwards.
 */
void fdrec_dataset_free(struct FdrecDataset *ds);

/**
 * Sizes of the dataset vocabularies and log.
 *
 * # Safety
 * `ds` must be a live dataset; the outputs must be writable.
 */
enum FdrecStatus fdrec_dataset_counts(const struct FdrecDataset *ds,
                                      size_t *users,
                                      size_t *stores,
                                      size_t *interactions);

/**
 * Half-open interaction range `[start, end)` of a partition.
 *
 * # Safety
 * `ds` must be a live dataset; the outputs must be writable.
 */
enum FdrecStatus fdrec_dataset_partition(const struct FdrecDataset *ds,
                                         enum FdrecPartition part,
                                         size_t *start,
                                         size_t *end);

/**
 * Dense index of a store id, as used for candidates.
 *
 * # Safety
 * `ds` must be a live dataset, `store_id` NUL-terminated, `out` writable.
 */
enum FdrecStatus fdrec_dataset_store_index(const struct FdrecDataset *ds,
                                           const char *store_id,
                                           uint32_t *out);

/**
 * Distinct stores the user of interaction `pos` ordered from earlier,
 * ascending. Writes at most `cap` indices to `buf` and the full count to
 * `len`; pass `cap = 0` to query the count.
 *
 * # Safety
 * `ds` must be a live dataset, `buf` must have room for `cap` values (it may
 * be null when `cap` is 0) and `len` must be writable.
 */
enum FdrecStatus fdrec_dataset_prior_stores(const struct FdrecDataset *ds,
                                            size_t pos,
                                            uint32_t *buf,
                                            size_t cap,
                                            size_t *len);

/**
 * The parameter-free situation-aware popularity baseline (repeat only).
 *
 * # Safety
 * `ds` must be a live dataset; `out` must be writable.
 */
enum FdrecStatus fdrec_model_hispop(const struct FdrecDataset *ds, struct FdrecModel **out);

/**
 * Restore a SOnly, RepRec or ExpRec checkpoint trained on the same data.
 *
 * # Safety
 * `ds` must be a live dataset, `path` NUL-terminated, `out` writable.
 */
enum FdrecStatus fdrec_model_load(const struct FdrecDataset *ds,
                                  const char *path,
                                  struct FdrecModel **out);

/**
 * Restore an ensemble together with its two base checkpoints.
 *
 * # Safety
 * `ds` must be a live dataset, the paths NUL-terminated, `out` writable.
 */
enum FdrecStatus fdrec_model_load_ensemble(const struct FdrecDataset *ds,
                                           const char *ensemble_path,
                                           const char *reprec_path,
                                           const char *exprec_path,
                                           struct FdrecModel **out);

/**
 * # Safety
 * `model` must come from a model constructor and not be used afterwards.
 */
void fdrec_model_free(struct FdrecModel *model);

/**
 * Trainable parameter count (bases included for an ensemble).
 *
 * # Safety
 * `model` must be a live model; `out` must be writable.
 */
enum FdrecStatus fdrec_model_parameter_count(const struct FdrecModel *model, size_t *out);

/**
 * Score `n` candidate store indices for interaction `pos`.
 *
 * # Safety
 * `candidates` must hold `n` values and `scores` room for `n`.
 */
enum FdrecStatus fdrec_score(const struct FdrecModel *model,
                             const struct FdrecDataset *ds,
                             size_t pos,
                             const uint32_t *candidates,
                             size_t n,
                             double *scores);

/**
 * HR@k and NDCG@k over all test cases of `protocol`.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out` must be writable.
 */
enum FdrecStatus fdrec_evaluate(const struct FdrecModel *model,
                                const struct FdrecDataset *ds,
                                enum FdrecProtocol protocol,
                                uint64_t seed,
                                size_t k,
                                struct FdrecMetrics *out);

/**
 * Run the command-line interface with `argc` arguments (program name first)
 * and return its exit code.
 *
 * # Safety
 * `argv` must hold `argc` NUL-terminated strings.
 */
int fdrec_run_cli(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDREC_H */
