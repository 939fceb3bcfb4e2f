#ifndef HFAT_H
#define HFAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfatStatus {
  HFAT_STATUS_OK = 0,
  HFAT_STATUS_NULL_POINTER = 1,
  HFAT_STATUS_INVALID_ARGUMENT = 2,
  HFAT_STATUS_DATA_ERROR = 3,
  HFAT_STATUS_NUMERIC_ERROR = 4,
  HFAT_STATUS_IO_ERROR = 5,
  HFAT_STATUS_PANIC = 6,
} HfatStatus;

/*
 Opaque dataset handle.
 */
typedef struct HfatDataset HfatDataset;

/*
 Opaque model handle.
 */
typedef struct HfatModel HfatModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until the
 next call into the library from the same thread.
 */
const char *hfat_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *hfat_version(void);

/*
 # Safety
 `s` must come from this library and not have been freed.
 */
void hfat_string_free(char *s);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HfatStatus hfat_model_load(const char *path, struct HfatModel **out);

/*
 Freshly initialized MLP with the given layer sizes (input, hidden...,
 classes).

 # Safety
 `layer_sizes` must point to `n_layers` readable values; `out` must be
 writable.
 */
enum HfatStatus hfat_model_init(const size_t *layer_sizes,
                                size_t n_layers,
                                uint64_t seed,
                                struct HfatModel **out);

/*
 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum HfatStatus hfat_model_save(const struct HfatModel *model, const char *path);

/*
 # Safety
 `model` must be NULL or a handle from this library not yet freed.
 */
void hfat_model_free(struct HfatModel *model);

/*
 # Safety
 `model` must be a live handle; both outputs writable.
 */
enum HfatStatus hfat_model_dims(const struct HfatModel *model,
                                size_t *input_dim,
                                size_t *n_classes);

/*
 Predicted class for each of `rows` row-major inputs of width `cols`.

 # Safety
 `x` must hold `rows * cols` values and `labels` room for `rows`.
 */
enum HfatStatus hfat_model_predict(const struct HfatModel *model,
                                   const double *x,
                                   size_t rows,
                                   size_t cols,
                                   size_t *labels);

/*
 Generates a dataset from a JSON spec and returns one split
 (0 = train, 1 = test).

 # Safety
 `spec_json` must be a NUL-terminated string; `out` writable.
 */
enum HfatStatus hfat_dataset_generate(const char *spec_json,
                                      uint32_t split,
                                      struct HfatDataset **out);

/*
 # Safety
 `dataset` must be a live handle; both outputs writable.
 */
enum HfatStatus hfat_dataset_shape(const struct HfatDataset *dataset, size_t *rows, size_t *cols);

/*
 Copies inputs (`rows * cols`, row-major) and labels (`rows`) out of a
 dataset. Either destination may be NULL to skip it.

 # Safety
 Non-NULL destinations must have room for the full arrays.
 */
enum HfatStatus hfat_dataset_copy(const struct HfatDataset *dataset, double *x, size_t *labels);

/*
 # Safety
 `dataset` must be NULL or a handle from this library not yet freed.
 */
void hfat_dataset_free(struct HfatDataset *dataset);

/*
 Natural and robust accuracy under the standard attack suite at budget
 `eps`, as an EvalReport JSON string.

 # Safety
 Handles must be live; `out_json` writable. Free the string with
 [`hfat_string_free`].
 */
enum HfatStatus hfat_evaluate(const struct HfatModel *model,
                              const struct HfatDataset *dataset,
                              double eps,
                              uint64_t seed,
                              char **out_json);

/*
 Adaptive branch weights from the two branch KL values.

 # Safety
 Both outputs must be writable.
 */
enum HfatStatus hfat_adaptive_lambda(double kl_main,
                                     double kl_aux,
                                     double *lambda_s,
                                     double *lambda_a);

/*
 Trains from a JSON config into `run_dir` and returns the final model.
 `out` may be NULL when only the run directory is wanted.

 # Safety
 Strings must be NUL-terminated; `out` NULL or writable.
 */
enum HfatStatus hfat_train(const char *config_json, const char *run_dir, struct HfatModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFAT_H */
