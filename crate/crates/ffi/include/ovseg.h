#ifndef OVSEG_H
#define OVSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Dataset split selector, passed as `uint32_t`.
typedef enum OvsegSplit {
  OVSEG_SPLIT_TRAIN = 0,
  OVSEG_SPLIT_EVAL = 1,
} OvsegSplit;

typedef enum OvsegStatus {
  OVSEG_STATUS_OK = 0,
  // A required pointer argument was null.
  OVSEG_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8, or a value was out of range.
  OVSEG_STATUS_INVALID_ARGUMENT = 2,
  // Bad configuration, shapes or input data.
  OVSEG_STATUS_USER_ERROR = 3,
  // I/O, numeric or format failure.
  OVSEG_STATUS_RUNTIME_ERROR = 4,
  // An internal panic was caught.
  OVSEG_STATUS_PANIC = 5,
} OvsegStatus;

typedef struct OvsegDataset OvsegDataset;

typedef struct OvsegModel OvsegModel;

typedef struct OvsegTensor OvsegTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *ovseg_last_error(void);

// Copies `len` values of shape `shape[0..rank]` into a new tensor.
//
// # Safety
// `shape` must point to `rank` values and `data` to `len` values.
enum OvsegStatus ovseg_tensor_new(const size_t *shape,
                                  size_t rank,
                                  const double *data,
                                  size_t len,
                                  struct OvsegTensor **out);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum OvsegStatus ovseg_tensor_read(const char *path, struct OvsegTensor **out);

// # Safety
// `t` must be a live tensor handle and `path` a nul-terminated string.
enum OvsegStatus ovseg_tensor_write(const struct OvsegTensor *t, const char *path);

// Rank of `t`, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t ovseg_tensor_rank(const struct OvsegTensor *t);

// Extents of `t`, or null for a null handle. Valid while `t` lives.
//
// # Safety
// `t` must be null or a live tensor handle.
const size_t *ovseg_tensor_shape(const struct OvsegTensor *t);

// Element count of `t`, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live tensor handle.
size_t ovseg_tensor_len(const struct OvsegTensor *t);

// Row-major values of `t`, or null for a null handle. Valid while `t` lives.
//
// # Safety
// `t` must be null or a live tensor handle.
const double *ovseg_tensor_data(const struct OvsegTensor *t);

// # Safety
// `t` must be null or a handle not yet freed.
void ovseg_tensor_free(struct OvsegTensor *t);

// Linear CKA between two `[N, D]` sample matrices.
//
// # Safety
// `x` and `y` must be live tensor handles and `out` writable.
enum OvsegStatus ovseg_linear_cka(const struct OvsegTensor *x,
                                  const struct OvsegTensor *y,
                                  double *out);

// High/low frequency log-ratio of a `[C, H, W]` map with default bins.
//
// # Safety
// `map` must be a live tensor handle and `out` writable.
enum OvsegStatus ovseg_frequency_ratio(const struct OvsegTensor *map, double r_c, double *out);

// Synthetic dataset with default settings and the given seed.
//
// # Safety
// `out` must be writable.
enum OvsegStatus ovseg_dataset_generate(uint64_t seed,
                                        size_t n_train,
                                        size_t n_eval,
                                        struct OvsegDataset **out);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum OvsegStatus ovseg_dataset_load(const char *path, struct OvsegDataset **out);

// # Safety
// `d` must be a live dataset handle and `path` a nul-terminated string.
enum OvsegStatus ovseg_dataset_save(const struct OvsegDataset *d, const char *path);

// Scene count of a split; 0 for a null handle or unknown split.
//
// # Safety
// `d` must be null or a live dataset handle.
size_t ovseg_dataset_len(const struct OvsegDataset *d, uint32_t split);

// # Safety
// `d` must be null or a handle not yet freed.
void ovseg_dataset_free(struct OvsegDataset *d);

// Trains on the dataset's train split. `config_json` holds training
// settings overlaid on the defaults (`"{}"` or null for none).
//
// # Safety
// `d` must be a live dataset handle, `config_json` null or a nul-terminated
// string, and `out` writable.
enum OvsegStatus ovseg_train(const struct OvsegDataset *d,
                             const char *config_json,
                             struct OvsegModel **out);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum OvsegStatus ovseg_model_load(const char *path, struct OvsegModel **out);

// # Safety
// `m` must be a live model handle and `path` a nul-terminated string.
enum OvsegStatus ovseg_model_save(const struct OvsegModel *m, const char *path);

// mIoU of the model on one split.
//
// # Safety
// `m` and `d` must be live handles and `out` writable.
enum OvsegStatus ovseg_model_eval(const struct OvsegModel *m,
                                  const struct OvsegDataset *d,
                                  uint32_t split,
                                  double *out);

// # Safety
// `m` must be null or a handle not yet freed.
void ovseg_model_free(struct OvsegModel *m);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* OVSEG_H */
