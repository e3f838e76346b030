#ifndef PAIRCFR_H
#define PAIRCFR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every call.
 */
typedef enum PcfrStatus {
  PCFR_STATUS_OK = 0,
  PCFR_STATUS_NULL_POINTER = 1,
  PCFR_STATUS_INVALID_ARGUMENT = 2,
  PCFR_STATUS_SHAPE = 3,
  PCFR_STATUS_NUMERIC = 4,
  PCFR_STATUS_DEGENERATE = 5,
  PCFR_STATUS_IO = 6,
  PCFR_STATUS_PARSE = 7,
  PCFR_STATUS_BUFFER_TOO_SMALL = 8,
  PCFR_STATUS_PANIC = 9,
} PcfrStatus;

typedef enum PcfrEditMode {
  PCFR_EDIT_MODE_EXACT_OPPOSITE = 0,
  PCFR_EDIT_MODE_RESAMPLE = 1,
} PcfrEditMode;

typedef enum PcfrSimilarity {
  PCFR_SIMILARITY_COSINE = 0,
  PCFR_SIMILARITY_DOT = 1,
} PcfrSimilarity;

typedef enum PcfrNoPositivePolicy {
  PCFR_NO_POSITIVE_POLICY_REPULSION_ONLY = 0,
  PCFR_NO_POSITIVE_POLICY_SKIP_ANCHOR = 1,
} PcfrNoPositivePolicy;

/*
 Synthetic dataset of originals and their counterfactuals.
 */
typedef struct PcfrDataset PcfrDataset;

/*
 Linear encoder and softmax head.
 */
typedef struct PcfrModel PcfrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *pcfr_version(void);

/*
 Copies this thread's last error message (empty after a successful call).

 # Safety
 `buf` must point to `len` writable bytes; `needed` may be null.
 */
enum PcfrStatus pcfr_last_error(char *buf, size_t len, size_t *needed);

/*
 Samples `n_pairs` originals with `k` counterfactuals each. `spec_json`
 is a JSON feature-model spec, or null for the canonical benchmark.

 # Safety
 `spec_json` must be null or a NUL-terminated string; `out` must be
 writable.
 */
enum PcfrStatus pcfr_dataset_generate(const char *spec_json,
                                      size_t n_pairs,
                                      size_t k,
                                      enum PcfrEditMode edit_mode,
                                      uint64_t seed,
                                      struct PcfrDataset **out);

/*
 Loads a dataset TSV and its JSON sidecar.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PcfrStatus pcfr_dataset_load(const char *path, struct PcfrDataset **out);

/*
 Writes the dataset TSV and its sidecar.

 # Safety
 `ds` must be a live handle; `path` a NUL-terminated string.
 */
enum PcfrStatus pcfr_dataset_save(const struct PcfrDataset *ds, const char *path);

/*
 Sample count and feature dimension.

 # Safety
 `ds` must be a live handle; outputs may be null.
 */
enum PcfrStatus pcfr_dataset_shape(const struct PcfrDataset *ds, size_t *n_samples, size_t *dim);

/*
 Hex SHA-256 of the dataset content.

 # Safety
 `ds` must be a live handle; `buf` must hold `len` bytes.
 */
enum PcfrStatus pcfr_dataset_content_hash(const struct PcfrDataset *ds,
                                          char *buf,
                                          size_t len,
                                          size_t *needed);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void pcfr_dataset_free(struct PcfrDataset *ds);

/*
 Ridge-regularized least-squares weights of `±1` labels on the features
 of a synthetic dataset; the first `dim` entries of `w` are written.

 # Safety
 `ds` must be a live handle; `w` must hold `len` doubles.
 */
enum PcfrStatus pcfr_closed_form_weights(const struct PcfrDataset *ds,
                                         double ridge,
                                         double *w,
                                         size_t len);

/*
 Encoder `(r1 + r2 + s) × embed_dim` and head `embed_dim × classes`,
 initialized from `N(0, init_std²)`, or zeros when `init_std` is 0.

 # Safety
 `out` must be writable.
 */
enum PcfrStatus pcfr_model_new(size_t dim_r1,
                               size_t dim_r2,
                               size_t dim_s,
                               size_t embed_dim,
                               size_t classes,
                               double init_std,
                               uint64_t seed,
                               struct PcfrModel **out);

/*
 Trains a copy of `model`; `out` receives the selected model. A null
 `config_json` means default training settings.

 # Safety
 Handles must be live; `config_json` null or NUL-terminated; `out`
 writable.
 */
enum PcfrStatus pcfr_model_train(const struct PcfrModel *model,
                                 const struct PcfrDataset *train_set,
                                 const struct PcfrDataset *valid_set,
                                 const char *config_json,
                                 struct PcfrModel **out);

/*
 Accuracy of argmax predictions on `ds`.

 # Safety
 Handles must be live; `accuracy` writable.
 */
enum PcfrStatus pcfr_model_evaluate(const struct PcfrModel *model,
                                    const struct PcfrDataset *ds,
                                    double *accuracy);

/*
 Copies the flattened parameters (encoder, head, bias) into `params`.
 With a null `params`, only `count` is written.

 # Safety
 `model` must be live; `params` null or `len` doubles; `count` writable.
 */
enum PcfrStatus pcfr_model_params(const struct PcfrModel *model,
                                  double *params,
                                  size_t len,
                                  size_t *count);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void pcfr_model_free(struct PcfrModel *model);

/*
 Mean softmax cross-entropy of row-major `n × k` logits; `grad`
 receives `∂L/∂logits` (`n × k`).

 # Safety
 Arrays must hold the stated number of elements; outputs writable.
 */
enum PcfrStatus pcfr_ce_loss(const double *logits,
                             size_t n,
                             size_t k,
                             const size_t *labels,
                             double *loss,
                             double *grad);

/*
 Supervised contrastive loss of row-major `n × d` embeddings; `grad`
 receives `∂L/∂z` (`n × d`).

 # Safety
 Arrays must hold the stated number of elements; outputs writable.
 */
enum PcfrStatus pcfr_cl_loss(const double *z,
                             size_t n,
                             size_t d,
                             const size_t *labels,
                             double tau,
                             enum PcfrSimilarity similarity,
                             enum PcfrNoPositivePolicy policy,
                             bool neutral_excluded,
                             double *loss,
                             double *grad);

/*
 Two-sided paired t-test of `a − b`.

 # Safety
 `a` and `b` must hold `n` doubles; `t` and `p` writable.
 */
enum PcfrStatus pcfr_paired_ttest(const double *a, const double *b, size_t n, double *t, double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAIRCFR_H */
