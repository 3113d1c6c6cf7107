#ifndef DRSL_H
#define DRSL_H

/* Generated by cbindgen from the drsl-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. `RUNTIME` covers failures inside the
 * pipeline (I/O, bad data, divergence); `USAGE` covers misuse of this
 * API itself (null pointers, malformed strings, bad buffer shapes).
 */
typedef enum DrslStatus {
  DRSL_STATUS_OK = 0,
  DRSL_STATUS_RUNTIME = 1,
  DRSL_STATUS_USAGE = 2,
} DrslStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct DrslModel DrslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static string.
 */
const char *drsl_version(void);

/**
 * Returns the message of the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *drsl_last_error(void);

/**
 * Generates a two-domain dataset (reference appearance shift) under
 * `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum DrslStatus drsl_generate_dataset(const char *out_dir,
                                      uint32_t image_size,
                                      uint32_t num_classes,
                                      uint32_t styles_per_class,
                                      uint32_t n_source,
                                      uint32_t n_target,
                                      uint64_t seed);

/**
 * Trains the source-domain model. `config_path` may be null for the
 * default configuration.
 *
 * # Safety
 * Non-null arguments must be valid NUL-terminated strings.
 */
enum DrslStatus drsl_train_source(const char *config_path,
                                  const char *dataset,
                                  const char *out_dir);

/**
 * Runs the self-training adaptation rounds starting from a source
 * checkpoint. `config_path` may be null for the default configuration.
 *
 * # Safety
 * Non-null arguments must be valid NUL-terminated strings.
 */
enum DrslStatus drsl_adapt(const char *config_path,
                           const char *checkpoint_dir,
                           const char *dataset,
                           const char *out_dir);

/**
 * Evaluates a checkpoint against the dataset's held-out target labels
 * and writes the mean IoU to `miou_out`.
 *
 * # Safety
 * Arguments must be valid; `miou_out` must point to writable memory.
 */
enum DrslStatus drsl_evaluate(const char *checkpoint_dir, const char *dataset, double *miou_out);

/**
 * Loads a checkpoint into an opaque model handle. On success the handle
 * is owned by the caller and must be released with `drsl_model_free`.
 *
 * # Safety
 * `checkpoint_dir` must be a valid string; `out` must be writable.
 */
enum DrslStatus drsl_model_load(const char *checkpoint_dir, struct DrslModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle from `drsl_model_load` that has not
 * been freed.
 */
void drsl_model_free(struct DrslModel *model);

/**
 * Writes the model's class count to `out`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum DrslStatus drsl_model_num_classes(const struct DrslModel *model, uint32_t *out);

/**
 * Segments one image. `image` is channel-major RGB (3 × height × width
 * floats in [0, 1]); `labels_out` receives height × width class ids.
 * Both spatial dimensions must be multiples of 4 (the encoder stride).
 *
 * # Safety
 * `model` must be a live handle; `image` must hold 3*height*width
 * floats; `labels_out` must hold height*width bytes.
 */
enum DrslStatus drsl_model_predict(const struct DrslModel *model,
                                   const float *image,
                                   uint32_t height,
                                   uint32_t width,
                                   uint8_t *labels_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRSL_H */
