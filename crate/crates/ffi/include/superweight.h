#ifndef SUPERWEIGHT_H
#define SUPERWEIGHT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SwnStatus {
  SWN_STATUS_OK = 0,
  SWN_STATUS_NULL_POINTER = 1,
  SWN_STATUS_INVALID_UTF8 = 2,
  SWN_STATUS_INVALID_ARGUMENT = 3,
  SWN_STATUS_IO = 4,
  SWN_STATUS_CHECKPOINT = 5,
  SWN_STATUS_CONFIG = 6,
  SWN_STATUS_BUDGET_TOO_SMALL = 7,
  SWN_STATUS_SHAPE = 8,
  SWN_STATUS_NUMERIC = 9,
  SWN_STATUS_FAILED = 10,
  SWN_STATUS_PANIC = 11,
} SwnStatus;

// Trained ensemble with materialized member weights.
typedef struct SwnModelHandle SwnModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *swn_last_error_message(void);

// Loads a checkpoint written by a run. On success `*out` owns a new handle.
enum SwnStatus swn_model_load(const char *path, struct SwnModelHandle **out);

// Releases a handle from [`swn_model_load`]; null is ignored.
//
// # Safety
// `model` is null or a live handle from [`swn_model_load`], freed once.
void swn_model_free(struct SwnModelHandle *model);

enum SwnStatus swn_model_member_count(const struct SwnModelHandle *model, uintptr_t *out);

// Flattened input features per sample.
enum SwnStatus swn_model_input_features(const struct SwnModelHandle *model, uintptr_t *out);

enum SwnStatus swn_model_classes(const struct SwnModelHandle *model, uintptr_t *out);

// Averaged class probabilities of the members selected by `member_mask`
// (bit i selects member i). `x` is row-major `[rows, input_features]`;
// `out` receives `rows * classes` values.
enum SwnStatus swn_model_predict_proba(const struct SwnModelHandle *model,
                                       const double *x,
                                       uintptr_t rows,
                                       uint64_t member_mask,
                                       double *out,
                                       uintptr_t out_len);

// Expected calibration error of row-major `[rows, classes]` probabilities.
enum SwnStatus swn_ece(const double *probs,
                       uintptr_t rows,
                       uintptr_t classes,
                       const uintptr_t *labels,
                       uintptr_t bins,
                       double *out);

// Groups layers `0..layer_count` from `pair_count` similarity entries
// `(similarity[k], layer_a[k], layer_b[k])`, merging pairs above `epsilon`.
// Layers no pair mentions stay alone. `out_group[l]` receives a group index;
// groups are numbered by their smallest layer.
enum SwnStatus swn_group_by_queue(const double *similarity,
                                  const uint32_t *layer_a,
                                  const uint32_t *layer_b,
                                  uintptr_t pair_count,
                                  double epsilon,
                                  uintptr_t layer_count,
                                  uint32_t *out_group);

// Runs the experiment in the TOML config at `config_path`, writing artifacts
// under `out_dir`. `*out_json` receives `{"dir": ..., "report": ...}`, to be
// released with [`swn_string_free`].
enum SwnStatus swn_run_experiment(const char *config_path, const char *out_dir, char **out_json);

// Releases a string returned by this library; null is ignored.
//
// # Safety
// `s` is null or a string returned by this library, freed once.
void swn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPERWEIGHT_H */
