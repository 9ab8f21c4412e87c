#ifndef MODT_H
#define MODT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ModtStatus {
  MODT_STATUS_OK = 0,
  MODT_STATUS_NULL_ARGUMENT = 1,
  MODT_STATUS_INVALID_INPUT = 2,
  /**
   * Malformed file or config; the CLI maps this to exit code 2.
   */
  MODT_STATUS_FORMAT_ERROR = 3,
  MODT_STATUS_IO_ERROR = 4,
  MODT_STATUS_RUNTIME_ERROR = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  MODT_STATUS_PANIC = 6,
} ModtStatus;

/**
 * Streaming tracker state.
 */
typedef struct ModtTracker ModtTracker;

/**
 * One tracked detection of the most recent frame.
 */
typedef struct ModtTrackedBox {
  uint32_t track_id;
  double center[3];
  /**
   * Width, length, height in meters.
   */
  double size[3];
  double yaw;
  double confidence;
} ModtTrackedBox;

/**
 * Tracking metrics. Undefined ratios (no ground truth, no matches) are NaN.
 */
typedef struct ModtMetrics {
  double mota;
  double motp;
  double amota;
  double samota;
  double amotp;
  uint64_t id_switches;
  uint64_t false_positives;
  uint64_t false_negatives;
  uint64_t fragmentations;
  uint64_t matches;
  uint64_t gt_objects;
  uint64_t gt_trajectories;
  uint64_t mostly_tracked;
  uint64_t mostly_lost;
} ModtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *modt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *modt_version(void);

/**
 * Opens a tracker from a checkpoint directory.
 *
 * # Safety
 * `checkpoint_dir` must be a NUL-terminated string and `out` a valid
 * pointer to writable storage.
 */
enum ModtStatus modt_tracker_open(const char *checkpoint_dir, struct ModtTracker **out);

/**
 * Creates an untrained tracker initialized from a TOML run configuration
 * (null for defaults).
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out` must be valid.
 */
enum ModtStatus modt_tracker_from_config(const char *config_toml, struct ModtTracker **out);

/**
 * Feeds one scan of `n_points` xyz triples (`3 * n_points` doubles).
 * Frame numbers must increase. `n_boxes` (optional) receives the number of
 * tracked boxes now available from [`modt_tracker_outputs`].
 *
 * # Safety
 * `tracker` must come from an open call; `points` must hold
 * `3 * n_points` doubles (it may be null when `n_points` is 0).
 */
enum ModtStatus modt_tracker_process_frame(struct ModtTracker *tracker,
                                           uint64_t frame,
                                           const double *points,
                                           size_t n_points,
                                           size_t *n_boxes);

/**
 * Copies up to `capacity` boxes of the last processed frame into `buf` and
 * stores the total count in `count`. Pass a null `buf` to query the count.
 *
 * # Safety
 * `buf` must be null or hold `capacity` elements; `count` must be valid.
 */
enum ModtStatus modt_tracker_outputs(const struct ModtTracker *tracker,
                                     struct ModtTrackedBox *buf,
                                     size_t capacity,
                                     size_t *count);

/**
 * Releases a tracker. Null is ignored.
 *
 * # Safety
 * `tracker` must be null or come from an open call, and not be used again.
 */
void modt_tracker_free(struct ModtTracker *tracker);

/**
 * Scores a track file against a ground-truth file.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be valid.
 */
enum ModtStatus modt_eval_files(const char *tracks_path,
                                const char *gt_path,
                                double dist_max,
                                struct ModtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODT_H */
