#ifndef ITDM_H
#define ITDM_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from the itdm-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible API call.
typedef enum ItdmStatus {
  ITDM_STATUS_OK = 0,
  ITDM_STATUS_NULL_POINTER = 1,
  ITDM_STATUS_INVALID_UTF8 = 2,
  ITDM_STATUS_INVALID_ARGUMENT = 3,
  ITDM_STATUS_SHAPE_MISMATCH = 4,
  ITDM_STATUS_NON_FINITE = 5,
  ITDM_STATUS_EMPTY_INPUT = 6,
  ITDM_STATUS_IDX_FORMAT = 7,
  ITDM_STATUS_IO = 8,
  ITDM_STATUS_DIVERGED = 9,
  ITDM_STATUS_JSON = 10,
  ITDM_STATUS_STALE_CACHE = 11,
  ITDM_STATUS_INTERNAL = 12,
} ItdmStatus;

// Opaque training-configuration handle.
typedef struct ItdmConfig ItdmConfig;

// Opaque labeled dataset handle.
typedef struct ItdmDataset ItdmDataset;

// Opaque finished-run handle: the metrics stream plus its summary.
typedef struct ItdmRun ItdmRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string; never freed.
const char *itdm_version(void);

// Message describing the most recent failure on this thread, or an empty
// string. The pointer stays valid until the next failing call on the same
// thread; do not free it.
const char *itdm_last_error_message(void);

// Release a string produced by this library.
//
// # Safety
// `s` must be a pointer previously returned through a `char**` out-parameter
// of this library, not yet freed; or null, in which case this is a no-op.
void itdm_string_free(char *s);

// Load an IDX image/label pair from disk.
//
// # Safety
// `images_path` and `labels_path` must be NUL-terminated strings; `out` must
// be a valid location to store the new handle.
enum ItdmStatus itdm_dataset_load_idx(const char *images_path,
                                      const char *labels_path,
                                      struct ItdmDataset **out);

// Generate a synthetic blob dataset (class means on scaled one-hot corners).
//
// # Safety
// `out` must be a valid location to store the new handle.
enum ItdmStatus itdm_dataset_blobs(size_t classes,
                                   size_t per_class,
                                   size_t dim,
                                   double separation,
                                   uint64_t seed,
                                   struct ItdmDataset **out);

// Number of samples, or -1 if the handle is null.
//
// # Safety
// `dataset` must be a live handle from this library or null.
int64_t itdm_dataset_len(const struct ItdmDataset *dataset);

// Number of classes, or -1 if the handle is null.
//
// # Safety
// `dataset` must be a live handle from this library or null.
int64_t itdm_dataset_num_classes(const struct ItdmDataset *dataset);

// # Safety
// `dataset` must be a handle from this library, freed at most once; null is
// a no-op.
void itdm_dataset_free(struct ItdmDataset *dataset);

// Fresh configuration with the library defaults.
//
// # Safety
// `out` must be a valid location to store the new handle.
enum ItdmStatus itdm_config_default(struct ItdmConfig **out);

// Parse a configuration from its JSON form (the `config` object inside a
// run summary).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be a valid location to
// store the new handle.
enum ItdmStatus itdm_config_from_json(const char *json, struct ItdmConfig **out);

// Serialize a configuration to JSON. The caller frees the string.
//
// # Safety
// `config` must be a live handle; `out` must be valid for a store.
enum ItdmStatus itdm_config_to_json(const struct ItdmConfig *config, char **out);

// # Safety
// `config` must be a handle from this library, freed at most once; null is
// a no-op.
void itdm_config_free(struct ItdmConfig *config);

// Run training to completion. Blocks until done.
//
// # Safety
// All three handles must be live; `out` must be valid for a store.
enum ItdmStatus itdm_train(const struct ItdmConfig *config,
                           const struct ItdmDataset *train_data,
                           const struct ItdmDataset *test_data,
                           struct ItdmRun **out);

// Number of metric records in a finished run, or -1 if null.
//
// # Safety
// `run` must be a live handle from this library or null.
int64_t itdm_run_num_records(const struct ItdmRun *run);

// The run's metrics stream in the `metrics.csv` format. Caller frees.
//
// # Safety
// `run` must be a live handle; `out` must be valid for a store.
enum ItdmStatus itdm_run_metrics_csv(const struct ItdmRun *run, char **out);

// The run's summary in the `summary.json` format. Caller frees.
//
// # Safety
// `run` must be a live handle; `out` must be valid for a store.
enum ItdmStatus itdm_run_summary_json(const struct ItdmRun *run, char **out);

// # Safety
// `run` must be a handle from this library, freed at most once; null is a
// no-op.
void itdm_run_free(struct ItdmRun *run);

// Squared biased MMD between two row-major feature matrices under a mixture
// of Gaussian kernels with explicit bandwidths.
//
// # Safety
// `h1` points to `m1 * dim` doubles, `h2` to `m2 * dim`, `sigmas` to
// `kernels` doubles; `out` must be valid for a store.
enum ItdmStatus itdm_mmd_sq_biased(const double *h1,
                                   size_t m1,
                                   const double *h2,
                                   size_t m2,
                                   size_t dim,
                                   const double *sigmas,
                                   size_t kernels,
                                   double *out);

// Joint matching loss between two feature matrices, with optional gradient
// output buffers.
//
// # Safety
// `h1`/`h2` point to `m1 * dim` / `m2 * dim` doubles. `out_loss` and
// `out_sigma_med` must be valid for stores. `out_grad_h1`/`out_grad_h2` are
// either null or buffers of `m1 * dim` / `m2 * dim` doubles.
enum ItdmStatus itdm_match_joint(const double *h1,
                                 size_t m1,
                                 const double *h2,
                                 size_t m2,
                                 size_t dim,
                                 size_t kernels,
                                 bool use_sqrt,
                                 double *out_loss,
                                 double *out_sigma_med,
                                 double *out_grad_h1,
                                 double *out_grad_h2);

// Class-conditional matching loss between two labeled feature matrices.
//
// # Safety
// `h1`/`h2` point to `m1 * dim` / `m2 * dim` doubles; `labels1`/`labels2`
// to `m1` / `m2` uint32 class indices below `num_classes`. The three `out_*`
// scalars must be valid for stores; gradient buffers are either null or
// sized like their feature matrix.
enum ItdmStatus itdm_match_class_conditional(const double *h1,
                                             const uint32_t *labels1,
                                             size_t m1,
                                             const double *h2,
                                             const uint32_t *labels2,
                                             size_t m2,
                                             size_t dim,
                                             size_t num_classes,
                                             size_t kernels,
                                             bool use_sqrt,
                                             double *out_loss,
                                             double *out_sigma_med,
                                             uint32_t *out_classes_matched,
                                             double *out_grad_h1,
                                             double *out_grad_h2);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITDM_H */
