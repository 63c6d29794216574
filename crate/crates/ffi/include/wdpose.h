#ifndef WDPOSE_H
#define WDPOSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 1 to 16 mirror the library's error kinds.
typedef enum WdStatus {
  WD_STATUS_OK = 0,
  WD_STATUS_NON_POSITIVE_DEPTH = 1,
  WD_STATUS_OUT_OF_BOUNDS = 2,
  WD_STATUS_NO_SUCH_LEVEL = 3,
  WD_STATUS_DEGENERATE_HULL = 4,
  WD_STATUS_NON_POSITIVE_SIZE = 5,
  WD_STATUS_ZERO_RAY = 6,
  WD_STATUS_DEGENERATE_CONFIGURATION = 7,
  WD_STATUS_TOO_FEW_CORRESPONDENCES = 8,
  WD_STATUS_NO_CONSENSUS = 9,
  WD_STATUS_NO_DETECTION = 10,
  WD_STATUS_ZERO_TRANSLATION = 11,
  WD_STATUS_OUT_OF_RANGE = 12,
  WD_STATUS_OBJECT_NOT_VISIBLE = 13,
  WD_STATUS_INVALID_PARAMETER = 14,
  WD_STATUS_PARSE = 15,
  WD_STATUS_IO = 16,
  WD_STATUS_NULL_POINTER = 100,
  WD_STATUS_PANIC = 101,
} WdStatus;

// Opaque model point cloud.
typedef struct WdModelCloud WdModelCloud;

// Opaque pyramid prediction.
typedef struct WdPrediction WdPrediction;

typedef struct WdRansacParams {
  size_t max_iterations;
  double inlier_threshold_px;
  size_t min_sample_size;
  double confidence;
  uint64_t seed;
} WdRansacParams;

typedef struct WdFusionParams {
  double objectness_threshold;
  double alpha;
  double lambda;
  struct WdRansacParams ransac;
} WdFusionParams;

typedef struct WdIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} WdIntrinsics;

// Model-to-camera transform; quaternion stored as `w, x, y, z`.
typedef struct WdPose {
  double quaternion[4];
  double translation[3];
} WdPose;

typedef struct WdPoint3 {
  double x;
  double y;
  double z;
} WdPoint3;

typedef struct WdPoint2 {
  double u;
  double v;
} WdPoint2;

typedef struct WdCorrespondence {
  struct WdPoint3 model;
  struct WdPoint2 image;
  double weight;
} WdCorrespondence;

typedef struct WdFusionOutput {
  struct WdPose pose;
  double estimated_size;
  size_t inliers;
  size_t correspondences;
  double mean_reprojection_error_px;
} WdFusionOutput;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *wd_version(void);

uint32_t wd_schema_version(void);

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *wd_last_error(void);

struct WdRansacParams wd_default_ransac_params(void);

struct WdFusionParams wd_default_fusion_params(void);

// Projects a model point into the image.
//
// # Safety
// Every pointer must be valid for one element of its type.
enum WdStatus wd_project(const struct WdIntrinsics *k,
                         const struct WdPose *pose,
                         const struct WdPoint3 *point,
                         struct WdPoint2 *out);

// Real-valued per-level sample counts for an object of `size` pixels.
//
// # Safety
// `reference_sizes` and `out` must each hold `levels` doubles.
enum WdStatus wd_sample_counts(double size,
                               double alpha,
                               double lambda,
                               const double *reference_sizes,
                               size_t levels,
                               double *out);

// 3D regression loss with default parameters for an object of the given
// diameter. `gradient` receives `2 · n` doubles, `u` then `v` per keypoint.
//
// # Safety
// `keypoints` and `predicted` must hold `n` elements, `gradient` `2 · n`
// doubles or be null, and the remaining pointers one element each.
enum WdStatus wd_loss3d(const struct WdIntrinsics *k,
                        const struct WdPose *gt_pose,
                        const struct WdPoint3 *keypoints,
                        const struct WdPoint2 *predicted,
                        size_t n,
                        double diameter,
                        double *value,
                        double *gradient);

// Robust pose from 2D-3D correspondences. `inlier_count` may be null.
//
// # Safety
// `corrs` must hold `n` elements; the other pointers one element each.
enum WdStatus wd_pnp_ransac(const struct WdCorrespondence *corrs,
                            size_t n,
                            const struct WdIntrinsics *k,
                            const struct WdRansacParams *params,
                            struct WdPose *out,
                            size_t *inlier_count);

// Parses a prediction from JSON (the `prediction` object of a simulation
// record). Free the handle with [`wd_prediction_free`].
//
// # Safety
// `json` must be a NUL-terminated string and `out` valid for one pointer.
enum WdStatus wd_prediction_from_json(const char *json, struct WdPrediction **out);

// # Safety
// `pred` must come from [`wd_prediction_from_json`] and not be freed twice.
void wd_prediction_free(struct WdPrediction *pred);

// # Safety
// `pred` must be a live handle or null.
size_t wd_prediction_num_levels(const struct WdPrediction *pred);

// Multi-scale fusion of a prediction into one pose.
//
// # Safety
// `keypoints` must hold 8 points; the other pointers one element each.
enum WdStatus wd_fuse(const struct WdPrediction *pred,
                      const struct WdPoint3 *keypoints,
                      const struct WdIntrinsics *k,
                      const struct WdFusionParams *params,
                      struct WdFusionOutput *out);

// Builds a model cloud from `n` points. Free with [`wd_model_cloud_free`].
//
// # Safety
// `points` must hold `n` elements and `out` be valid for one pointer.
enum WdStatus wd_model_cloud_new(const struct WdPoint3 *points,
                                 size_t n,
                                 struct WdModelCloud **out);

// # Safety
// `cloud` must come from [`wd_model_cloud_new`] and not be freed twice.
void wd_model_cloud_free(struct WdModelCloud *cloud);

// Largest pairwise distance of the cloud, or NaN for a null handle.
//
// # Safety
// `cloud` must be a live handle or null.
double wd_model_cloud_diameter(const struct WdModelCloud *cloud);

// ADD and ADI distances between two poses. Either output may be null.
//
// # Safety
// `cloud`, `gt` and `est` must be valid; outputs valid or null.
enum WdStatus wd_pose_distances(const struct WdModelCloud *cloud,
                                const struct WdPose *gt,
                                const struct WdPose *est,
                                double *add,
                                double *adi);

// Rotation error `e_q` (radians) and relative translation error `e_t`.
//
// # Safety
// Every pointer must be valid for one element.
enum WdStatus wd_speed_score(const struct WdPose *gt,
                             const struct WdPose *est,
                             double *e_q,
                             double *e_t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WDPOSE_H */
