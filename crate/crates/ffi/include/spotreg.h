#ifndef SPOTREG_H
#define SPOTREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpotregStatus {
  SPOTREG_STATUS_OK = 0,
  SPOTREG_STATUS_NULL_POINTER = 1,
  SPOTREG_STATUS_INVALID_INPUT = 2,
  SPOTREG_STATUS_DEGENERATE = 3,
  SPOTREG_STATUS_DIMENSION_MISMATCH = 4,
  SPOTREG_STATUS_EMPTY = 5,
  SPOTREG_STATUS_PARSE = 6,
  SPOTREG_STATUS_NO_CONSENSUS = 7,
  SPOTREG_STATUS_IO = 8,
  SPOTREG_STATUS_PANIC = 9,
} SpotregStatus;

/**
 * Opaque point cloud.
 */
typedef struct SpotregCloud SpotregCloud;

/**
 * Opaque configured pipeline.
 */
typedef struct SpotregPipeline SpotregPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *spotreg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spotreg_version(void);

/**
 * Builds a cloud from `n` packed `x y z` triples.
 *
 * # Safety
 * `xyz` must point to `3 * n` doubles and `out` must be writable.
 */
enum SpotregStatus spotreg_cloud_from_xyz(const double *xyz, size_t n, struct SpotregCloud **out);

/**
 * Loads a cloud from disk. `format` is `"kitti-bin"`, `"ply"`, `"xyz"`, or
 * NULL to infer it from the extension.
 *
 * # Safety
 * `path` and a non-NULL `format` must be NUL-terminated; `out` must be
 * writable.
 */
enum SpotregStatus spotreg_cloud_load(const char *path,
                                      const char *format,
                                      struct SpotregCloud **out);

/**
 * Number of points; 0 for NULL.
 *
 * # Safety
 * `cloud` must be NULL or a live handle.
 */
size_t spotreg_cloud_len(const struct SpotregCloud *cloud);

/**
 * # Safety
 * `cloud` must be NULL or a handle not yet freed.
 */
void spotreg_cloud_free(struct SpotregCloud *cloud);

/**
 * Creates a pipeline. `config_toml` holds a run configuration in TOML (its
 * `[pipeline]` table is used) or is NULL for defaults.
 *
 * # Safety
 * A non-NULL `config_toml` must be NUL-terminated; `out` must be writable.
 */
enum SpotregStatus spotreg_pipeline_new(const char *config_toml, struct SpotregPipeline **out);

/**
 * # Safety
 * `pipeline` must be NULL or a handle not yet freed.
 */
void spotreg_pipeline_free(struct SpotregPipeline *pipeline);

/**
 * Registers `source` onto `target`, writing the transform to `out_matrix`.
 * `fine_failed` may be NULL; otherwise it receives 1 when the reported
 * pose comes from the coarse stage.
 *
 * # Safety
 * Handles must be live; `out_matrix` must hold 16 doubles.
 */
enum SpotregStatus spotreg_register(const struct SpotregPipeline *pipeline,
                                    const struct SpotregCloud *source,
                                    const struct SpotregCloud *target,
                                    double *out_matrix,
                                    int32_t *fine_failed);

/**
 * Weighted least-squares rigid fit of `n` point pairs; `weights` may be
 * NULL for unit weights.
 *
 * # Safety
 * `source` and `target` must hold `3 * n` doubles, a non-NULL `weights`
 * `n` doubles, and `out_matrix` 16 doubles.
 */
enum SpotregStatus spotreg_kabsch(const double *source,
                                  const double *target,
                                  const double *weights,
                                  size_t n,
                                  double *out_matrix);

/**
 * Rotation error in degrees between two rigid transforms.
 *
 * # Safety
 * `estimate` and `truth` must hold 16 doubles; `out` must be writable.
 */
enum SpotregStatus spotreg_rre(const double *estimate, const double *truth, double *out);

/**
 * Translation error between two rigid transforms.
 *
 * # Safety
 * `estimate` and `truth` must hold 16 doubles; `out` must be writable.
 */
enum SpotregStatus spotreg_rte(const double *estimate, const double *truth, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPOTREG_H */
