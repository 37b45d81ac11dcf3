#ifndef CALONET_H
#define CALONET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum CalonetStatus {
  CALONET_STATUS_OK = 0,
  CALONET_STATUS_NULL_POINTER = 1,
  CALONET_STATUS_INVALID_ARGUMENT = 2,
  CALONET_STATUS_PARSE = 3,
  CALONET_STATUS_IO = 4,
  CALONET_STATUS_CONFIG = 5,
  CALONET_STATUS_SHAPE = 6,
  CALONET_STATUS_VERSION = 7,
  CALONET_STATUS_CORRUPT = 8,
  CALONET_STATUS_RUNTIME = 9,
  CALONET_STATUS_PANIC = 10,
} CalonetStatus;

/*
 Graph export formats.
 */
typedef enum CalonetGraphFormat {
  CALONET_GRAPH_FORMAT_DOT = 0,
  CALONET_GRAPH_FORMAT_JSON = 1,
} CalonetGraphFormat;

/*
 Thresholded causal matrix of one sample.
 */
typedef struct CalonetCausalMatrix CalonetCausalMatrix;

/*
 Parsed dataset.
 */
typedef struct CalonetDataset CalonetDataset;

/*
 Trained or loaded classifier.
 */
typedef struct CalonetModel CalonetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next library call on the same thread.
 */
const char *calonet_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *calonet_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void calonet_string_free(char *s);

/*
 Loads a `.ts` or `.csv` dataset with default parse options.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CalonetStatus calonet_dataset_load(const char *path, struct CalonetDataset **out);

/*
 Parses `.ts` text held in memory.

 # Safety
 `text` must be a NUL-terminated string; `out` must be writable.
 */
enum CalonetStatus calonet_dataset_parse_ts(const char *text, struct CalonetDataset **out);

/*
 # Safety
 `ds` must come from this library and not have been freed. Null is ignored.
 */
void calonet_dataset_free(struct CalonetDataset *ds);

/*
 Number of samples, dimensions, series length and classes.

 # Safety
 `ds` must be a live dataset handle; every output pointer must be
 writable or null (null outputs are skipped).
 */
enum CalonetStatus calonet_dataset_shape(const struct CalonetDataset *ds,
                                         size_t *n_samples,
                                         size_t *n_dims,
                                         size_t *length,
                                         size_t *n_classes);

/*
 Label index of one sample.

 # Safety
 `ds` must be a live dataset handle; `out` must be writable.
 */
enum CalonetStatus calonet_dataset_label(const struct CalonetDataset *ds,
                                         size_t sample,
                                         size_t *out);

/*
 Copies one sample, row-major `[n_dims][length]`, into `buf`.

 # Safety
 `ds` must be a live dataset handle; `buf` must hold `buf_len` doubles.
 */
enum CalonetStatus calonet_dataset_sample(const struct CalonetDataset *ds,
                                          size_t sample,
                                          double *buf,
                                          size_t buf_len);

/*
 Transfer entropy in bits from `source` to `target` with equal-frequency
 binning.

 # Safety
 `source` and `target` must each hold `len` doubles; `out` must be writable.
 */
enum CalonetStatus calonet_transfer_entropy(const double *source,
                                            const double *target,
                                            size_t len,
                                            size_t n_bins,
                                            size_t k,
                                            size_t l,
                                            double *out);

/*
 Causal matrix of one sample of a dataset.

 # Safety
 `ds` must be a live dataset handle; `out` must be writable.
 */
enum CalonetStatus calonet_causal_matrix_build(const struct CalonetDataset *ds,
                                               size_t sample,
                                               double threshold,
                                               size_t n_bins,
                                               size_t k,
                                               size_t l,
                                               struct CalonetCausalMatrix **out);

/*
 # Safety
 `m` must come from this library and not have been freed. Null is ignored.
 */
void calonet_causal_matrix_free(struct CalonetCausalMatrix *m);

/*
 Number of nodes.

 # Safety
 `m` must be a live matrix handle; `out` must be writable.
 */
enum CalonetStatus calonet_causal_matrix_size(const struct CalonetCausalMatrix *m, size_t *out);

/*
 Entry `(i, j)`: the score of edge `i -> j`, or 0 when there is none.

 # Safety
 `m` must be a live matrix handle; `out` must be writable.
 */
enum CalonetStatus calonet_causal_matrix_get(const struct CalonetCausalMatrix *m,
                                             size_t i,
                                             size_t j,
                                             double *out);

/*
 DOT or JSON text of the matrix; release with `calonet_string_free`.

 # Safety
 `m` must be a live matrix handle; `out` must be writable.
 */
enum CalonetStatus calonet_causal_matrix_export(const struct CalonetCausalMatrix *m,
                                                enum CalonetGraphFormat format,
                                                char **out);

/*
 Trains a model with default architecture. Inputs are z-normalized with
 training statistics when `normalize` is non-zero.

 # Safety
 `train_set` and `test_set` must be live dataset handles; `out` must be
 writable.
 */
enum CalonetStatus calonet_model_train(const struct CalonetDataset *train_set,
                                       const struct CalonetDataset *test_set,
                                       size_t epochs,
                                       uint64_t seed,
                                       int32_t normalize,
                                       struct CalonetModel **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CalonetStatus calonet_model_load(const char *path, struct CalonetModel **out);

/*
 # Safety
 `model` must be a live model handle; `path` a NUL-terminated string.
 */
enum CalonetStatus calonet_model_save(const struct CalonetModel *model, const char *path);

/*
 # Safety
 `model` must come from this library and not have been freed. Null is ignored.
 */
void calonet_model_free(struct CalonetModel *model);

/*
 Predicted class of one raw sample.

 # Safety
 `model` and `ds` must be live handles; `out` must be writable.
 */
enum CalonetStatus calonet_model_predict(const struct CalonetModel *model,
                                         const struct CalonetDataset *ds,
                                         size_t sample,
                                         size_t *out);

/*
 Accuracy of the model on a raw dataset.

 # Safety
 `model` and `ds` must be live handles; `out` must be writable.
 */
enum CalonetStatus calonet_model_evaluate(const struct CalonetModel *model,
                                          const struct CalonetDataset *ds,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALONET_H */
