#ifndef RIO_H
#define RIO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. Values are stable.
 */
typedef enum RioStatus {
  RIO_STATUS_OK = 0,
  RIO_STATUS_NULL_POINTER = 1,
  RIO_STATUS_INVALID_ARGUMENT = 2,
  RIO_STATUS_CONFIG = 3,
  RIO_STATUS_DATASET = 4,
  RIO_STATUS_INPUT = 5,
  RIO_STATUS_IO = 6,
  RIO_STATUS_NUMERICAL_HEALTH = 7,
  RIO_STATUS_PROPAGATION = 8,
  RIO_STATUS_GEOMETRY = 9,
  RIO_STATUS_FEATURE_BOOKKEEPING = 10,
  /**
   * A previous step failed; the filter must be recreated.
   */
  RIO_STATUS_FAILED = 11,
  RIO_STATUS_PANIC = 12,
} RioStatus;

/**
 * Streaming filter handle.
 */
typedef struct RioFilter RioFilter;

/**
 * Ablation switches and checking level.
 */
typedef struct RioOptions {
  bool doppler_coupling;
  bool cross_matching;
  bool strict_health;
  /**
   * Overrides the configured feature capacity when nonzero.
   */
  size_t max_features;
} RioOptions;

/**
 * One radar detection. `snr` is NaN when not reported.
 */
typedef struct RioDetection {
  double azimuth;
  double elevation;
  double range;
  double doppler;
  double snr;
} RioDetection;

/**
 * Counters of one processed scan.
 */
typedef struct RioScanSummary {
  size_t detections;
  size_t stationarity_rejected;
  size_t matched;
  size_t cross_matched;
  size_t inserted;
  size_t pruned;
  size_t feature_count;
} RioScanSummary;

/**
 * Estimated pose with velocity and the nav error standard deviations
 * `[δv, δθ, δp]`.
 */
typedef struct RioPose {
  double t;
  double position[3];
  /**
   * Body-to-world, `w, x, y, z`.
   */
  double quaternion[4];
  /**
   * World frame.
   */
  double velocity[3];
  double sigma[9];
} RioPose;

typedef struct RioMetrics {
  double ape_rmse;
  double rpe_rmse;
  /**
   * Degrees.
   */
  double rre_rmse;
  double end_pose_error;
  double trajectory_rmse;
  size_t samples;
} RioMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *rio_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rio_version(void);

/**
 * Defaults: coupling and cross-matching on, cheap health checks, configured capacity.
 */
struct RioOptions rio_options_default(void);

/**
 * Create a filter from a TOML configuration string. `options` may be null.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string, `options` null or valid,
 * `out` a valid pointer.
 */
enum RioStatus rio_filter_new(const char *config_toml,
                              const struct RioOptions *options,
                              struct RioFilter **out);

/**
 * # Safety
 * `filter` must be null or a handle from [`rio_filter_new`] not yet freed.
 */
void rio_filter_free(struct RioFilter *filter);

/**
 * Feed one IMU sample (specific force m/s², body rate rad/s).
 *
 * # Safety
 * `filter` must be a live handle; `accel` and `gyro` must point to 3 doubles.
 */
enum RioStatus rio_filter_push_imu(struct RioFilter *filter,
                                   double t,
                                   const double *accel,
                                   const double *gyro);

/**
 * Feed one radar scan of sensor `sensor_id`. `summary` may be null.
 *
 * # Safety
 * `filter` must be a live handle, `sensor_id` a NUL-terminated string,
 * `detections` valid for `count` elements (may be null when `count` is 0).
 */
enum RioStatus rio_filter_push_scan(struct RioFilter *filter,
                                    const char *sensor_id,
                                    double t,
                                    const struct RioDetection *detections,
                                    size_t count,
                                    struct RioScanSummary *summary);

/**
 * Current estimate. Fails with `Input` before the first IMU sample.
 *
 * # Safety
 * `filter` must be a live handle and `out` valid.
 */
enum RioStatus rio_filter_nav_state(const struct RioFilter *filter, struct RioPose *out);

/**
 * Number of tracked features.
 *
 * # Safety
 * `filter` must be a live handle and `out` valid.
 */
enum RioStatus rio_filter_feature_count(const struct RioFilter *filter, size_t *out);

/**
 * Number of poses recorded so far (one per IMU sample).
 *
 * # Safety
 * `filter` must be a live handle and `out` valid.
 */
enum RioStatus rio_filter_trajectory_len(const struct RioFilter *filter, size_t *out);

/**
 * Recorded pose `index`.
 *
 * # Safety
 * `filter` must be a live handle and `out` valid.
 */
enum RioStatus rio_filter_trajectory_pose(const struct RioFilter *filter,
                                          size_t index,
                                          struct RioPose *out);

/**
 * Run diagnostics as a JSON string; release it with [`rio_string_free`].
 *
 * # Safety
 * `filter` must be a live handle and `out` valid.
 */
enum RioStatus rio_filter_diagnostics_json(const struct RioFilter *filter, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void rio_string_free(char *s);

/**
 * Replay dataset files and write the trajectory CSV, like `rio run`.
 * `radar_ids[i]` names the stream in `radar_paths[i]`. `options` and
 * `diag_path` may be null. A replay that fails midway still writes the
 * partial trajectory and returns the failure.
 *
 * # Safety
 * All strings must be NUL-terminated; the two arrays must hold `radar_count`
 * entries each.
 */
enum RioStatus rio_run_files(const char *config_path,
                             const char *imu_path,
                             const char *const *radar_ids,
                             const char *const *radar_paths,
                             size_t radar_count,
                             const struct RioOptions *options,
                             const char *out_path,
                             const char *diag_path);

/**
 * Metrics of an estimated trajectory file against a reference file.
 *
 * # Safety
 * Strings must be NUL-terminated and `out` valid.
 */
enum RioStatus rio_evaluate_files(const char *est_path,
                                  const char *ref_path,
                                  double rate_hz,
                                  struct RioMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RIO_H */
