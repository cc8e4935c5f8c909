#ifndef CONECAL_H
#define CONECAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConecalStatus {
  CONECAL_STATUS_OK = 0,
  CONECAL_STATUS_NULL_POINTER = 1,
  CONECAL_STATUS_INVALID_UTF8 = 2,
  CONECAL_STATUS_INVALID_CONFIG = 3,
  CONECAL_STATUS_OUT_OF_RANGE = 4,
  CONECAL_STATUS_JSON = 5,
  CONECAL_STATUS_SINGULAR_SURFACE = 6,
  CONECAL_STATUS_RAY_FAILURE = 7,
  CONECAL_STATUS_UNUSABLE_DATA = 8,
  CONECAL_STATUS_DIVERGED = 9,
  CONECAL_STATUS_UNPROJECTABLE = 10,
  CONECAL_STATUS_IO = 11,
  CONECAL_STATUS_PANIC = 12,
} ConecalStatus;

// Scene: camera, cone, RBF surface and board poses.
typedef struct ConecalScene ConecalScene;

// Exit ray of the cover, in camera coordinates.
typedef struct ConecalRay {
  double origin[3];
  double direction[3];
} ConecalRay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *conecal_last_error_message(void);

// Library version as a static string.
const char *conecal_version(void);

// Builds a scene from a ground-truth JSON document as written by
// `conecal generate`.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid pointer.
enum ConecalStatus conecal_scene_from_json(const char *json, struct ConecalScene **out);

// # Safety
// `scene` must come from [`conecal_scene_from_json`] and not be used
// afterwards. Null is ignored.
void conecal_scene_free(struct ConecalScene *scene);

// Number of board poses in the scene, 0 for null.
//
// # Safety
// `scene` must be null or a live scene handle.
size_t conecal_scene_pose_count(const struct ConecalScene *scene);

// Traces pixel `(px, py)` through both cover surfaces.
//
// # Safety
// `scene` must be a live handle and `out` a valid pointer.
enum ConecalStatus conecal_trace(const struct ConecalScene *scene,
                                 double px,
                                 double py,
                                 struct ConecalRay *out);

// Board-local point in meters hit by pixel `(px, py)` for pose `image`.
//
// # Safety
// `scene` must be a live handle and `out` must point to two doubles.
enum ConecalStatus conecal_raycast(const struct ConecalScene *scene,
                                   size_t image,
                                   double px,
                                   double py,
                                   double *out);

// Pixel offset from `(px, py)` to the pinhole projection of the point its
// ray reaches at camera depth `depth_m`.
//
// # Safety
// `scene` must be a live handle and `out` must point to two doubles.
enum ConecalStatus conecal_distortion_vector(const struct ConecalScene *scene,
                                             double px,
                                             double py,
                                             double depth_m,
                                             double *out);

// Distorted pixel of board-local point `(x, y)` of pose `image`.
//
// # Safety
// `scene` must be a live handle and `out` must point to two doubles.
enum ConecalStatus conecal_project_corner(const struct ConecalScene *scene,
                                          size_t image,
                                          double x,
                                          double y,
                                          double *out);

// Board-plane RMSE in centimeters of the scene surface against an
// observation document. The poses come from the observations.
//
// # Safety
// `scene` must be a live handle, `observations_json` a NUL-terminated
// string and `out_cm` a valid pointer.
enum ConecalStatus conecal_rmse(const struct ConecalScene *scene,
                                const char *observations_json,
                                double *out_cm);

// Fits the RBF amplitudes, starting from the scene surface, and returns a
// fit document in `out_fit_json`. `options_json` may be null for the
// default optimizer. On divergence the document is still produced, with
// the last stable amplitudes, and `Diverged` is returned.
//
// # Safety
// `scene` must be a live handle, the strings NUL-terminated or null where
// allowed, and `out_fit_json` a valid pointer.
enum ConecalStatus conecal_calibrate(const struct ConecalScene *scene,
                                     const char *observations_json,
                                     const char *options_json,
                                     char **out_fit_json);

// # Safety
// `s` must be null or a string returned by this library, released once.
void conecal_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONECAL_H */
