#ifndef DEVSHIFT_H
#define DEVSHIFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define DS_OK 0

#define DS_ERR_NULL_POINTER 1

#define DS_ERR_INVALID_ARGUMENT 2

#define DS_ERR_IO 3

#define DS_ERR_FORMAT 4

#define DS_ERR_SHAPE 5

#define DS_ERR_NUMERICAL 6

#define DS_ERR_BUFFER_TOO_SMALL 7

#define DS_ERR_PANIC 8

#define DS_ERR_OTHER 9

// Opaque scene classifier.
typedef struct DsClassifier DsClassifier;

// Opaque FHVAE model.
typedef struct DsFhvae DsFhvae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next devshift call on the same thread.
const char *ds_last_error(void);

// Library version as a static NUL-terminated string.
const char *ds_version(void);

// Loads an FHVAE checkpoint written by `devshift fhvae-train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
int32_t ds_fhvae_load(const char *path, struct DsFhvae **out);

// Releases a model; null is ignored.
//
// # Safety
// `h` must come from [`ds_fhvae_load`] and not be used afterwards.
void ds_fhvae_free(struct DsFhvae *h);

// Reports the model geometry. Any output pointer may be null.
//
// # Safety
// `h` must be a live handle; non-null outputs must be writable.
int32_t ds_fhvae_dims(const struct DsFhvae *h,
                      uintptr_t *n_bands,
                      uintptr_t *seg_len,
                      uintptr_t *dim_z1,
                      uintptr_t *dim_z2);

// Writes the sequence-level mu2 estimate (`dim_z2` values) of one
// feature matrix.
//
// # Safety
// `frames` must hold `n_frames * n_bands` values and `out_mu2` have room
// for `capacity` values.
int32_t ds_fhvae_infer_mu2(const struct DsFhvae *h,
                           const double *frames,
                           uintptr_t n_frames,
                           uintptr_t n_bands,
                           double *out_mu2,
                           uintptr_t capacity);

// Converts one feature matrix toward `target_mu2`. The output holds
// `floor(n_frames / seg_len) * seg_len` frames, stored in `*out_frames`.
//
// # Safety
// Buffers must match the stated sizes; `out` needs room for `capacity`
// values.
int32_t ds_fhvae_convert(const struct DsFhvae *h,
                         const double *frames,
                         uintptr_t n_frames,
                         uintptr_t n_bands,
                         const double *target_mu2,
                         uintptr_t mu2_len,
                         double *out,
                         uintptr_t capacity,
                         uintptr_t *out_frames);

// Writes one row of `dim_z1` posterior-mean values per non-overlapping
// segment; the row count goes to `*out_rows`.
//
// # Safety
// Buffers must match the stated sizes.
int32_t ds_fhvae_extract_z1(const struct DsFhvae *h,
                            const double *frames,
                            uintptr_t n_frames,
                            uintptr_t n_bands,
                            double *out,
                            uintptr_t capacity,
                            uintptr_t *out_rows);

// Mean of the per-segment z2 posterior means over a domain given as
// `n_seqs` matrices, averaged per sequence first.
//
// # Safety
// `frames[i]` must hold `n_frames[i] * n_bands` values for every `i`.
int32_t ds_fhvae_infer_domain_mu2(const struct DsFhvae *h,
                                  const double *const *frames,
                                  const uintptr_t *n_frames,
                                  uintptr_t n_seqs,
                                  uintptr_t n_bands,
                                  double *out_mu2,
                                  uintptr_t capacity);

// Loads a classifier checkpoint written by `devshift clf-train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
int32_t ds_classifier_load(const char *path, struct DsClassifier **out);

// Releases a classifier; null is ignored.
//
// # Safety
// `h` must come from [`ds_classifier_load`] and not be used afterwards.
void ds_classifier_free(struct DsClassifier *h);

// Number of scene classes, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
uintptr_t ds_classifier_num_classes(const struct DsClassifier *h);

// Label of class `index`, owned by the handle; null when out of range.
//
// # Safety
// `h` must be null or a live handle.
const char *ds_classifier_class_label(const struct DsClassifier *h, uintptr_t index);

// Writes class probabilities (`num_classes` values) for one feature
// matrix.
//
// # Safety
// `frames` must hold `n_frames * n_bands` values and `out_probs` have room
// for `capacity` values.
int32_t ds_classifier_predict(const struct DsClassifier *h,
                              const double *frames,
                              uintptr_t n_frames,
                              uintptr_t n_bands,
                              double *out_probs,
                              uintptr_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEVSHIFT_H */
