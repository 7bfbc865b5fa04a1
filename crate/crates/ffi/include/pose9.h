#ifndef POSE9_H
#define POSE9_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum Pose9Status {
  Pose9Ok = 0,
  /**
   * Bad configuration or argument (unknown category, bad preset,
   * zero sizes, malformed UTF-8, ...).
   */
  Pose9InvalidArgument = 1,
  /**
   * Filesystem or parse failure.
   */
  Pose9Io = 2,
  /**
   * Numerical failure (divergence, no RANSAC consensus, degenerate
   * input).
   */
  Pose9Numerical = 3,
  /**
   * A required pointer was null.
   */
  Pose9NullPointer = 4,
  /**
   * A panic crossed the boundary and was contained.
   */
  Pose9Panic = 5,
} Pose9Status;

/**
 * Opaque fit outcome.
 */
typedef struct Pose9Fit Pose9Fit;

/**
 * Opaque synthetic instance (observed cloud plus ground truth).
 */
typedef struct Pose9Instance Pose9Instance;

/**
 * Opaque category profile (mean-shape prior, mean size, symmetry).
 */
typedef struct Pose9Profile Pose9Profile;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static name for a status code, e.g. for log messages.
 */
const char *pose9_status_name(enum Pose9Status status);

/**
 * Library version as a static string.
 */
const char *pose9_version(void);

/**
 * Builds the profile of a named category.
 *
 * `category` is one of "bowl", "box", "camera", "can", "laptop";
 * `prior_points` is the prior cloud resolution (0 picks the default).
 */
enum Pose9Status pose9_profile_new(const char *category,
                                   uintptr_t prior_points,
                                   struct Pose9Profile **out);

void pose9_profile_free(struct Pose9Profile *profile);

/**
 * Generates a deterministic synthetic instance.
 *
 * `points` of 0 picks the default cloud size. `noise_sigma` is in
 * meters; `outlier_fraction` in [0, 0.9).
 */
enum Pose9Status pose9_instance_new(const char *category,
                                    uint64_t seed,
                                    uintptr_t points,
                                    double noise_sigma,
                                    double outlier_fraction,
                                    struct Pose9Instance **out);

void pose9_instance_free(struct Pose9Instance *instance);

/**
 * Number of observed points.
 */
uintptr_t pose9_instance_len(const struct Pose9Instance *instance);

/**
 * Copies the observed cloud into `buffer` as x,y,z triples; `buffer`
 * must hold `3 * pose9_instance_len` doubles.
 */
enum Pose9Status pose9_instance_observed(const struct Pose9Instance *instance, double *buffer);

/**
 * Fits one instance with an ablation preset ("a1".."d", case
 * insensitive). `max_steps` of 0 picks the default budget.
 */
enum Pose9Status pose9_fit(const struct Pose9Instance *instance,
                           const struct Pose9Profile *profile,
                           const char *preset,
                           uint64_t seed,
                           uintptr_t max_steps,
                           struct Pose9Fit **out);

void pose9_fit_free(struct Pose9Fit *fit);

/**
 * Recovered pose: rotation as 9 doubles (row-major), translation and
 * size as 3 doubles each. Null out-pointers are skipped.
 */
enum Pose9Status pose9_fit_pose(const struct Pose9Fit *fit,
                                double *rotation,
                                double *translation,
                                double *size);

/**
 * Final weighted loss of the winning branch.
 */
double pose9_fit_final_loss(const struct Pose9Fit *fit);

/**
 * Accepted descent steps of the winning branch.
 */
uintptr_t pose9_fit_steps(const struct Pose9Fit *fit);

/**
 * Copies the recovered inlier labels (1 inlier, 0 outlier) into
 * `buffer`, which must hold `pose9_instance_len` bytes.
 */
enum Pose9Status pose9_fit_inliers(const struct Pose9Fit *fit, uint8_t *buffer);

/**
 * Symmetry-aware error of the fit against the instance ground truth.
 * Null out-pointers are skipped.
 */
enum Pose9Status pose9_fit_error(const struct Pose9Fit *fit,
                                 const struct Pose9Profile *profile,
                                 double *rotation_deg,
                                 double *translation,
                                 double *iou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSE9_H */
