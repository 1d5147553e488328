#ifndef PIGNN_H
#define PIGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PignnStatus {
  PIGNN_STATUS_OK = 0,
  PIGNN_STATUS_NULL_POINTER = 1,
  PIGNN_STATUS_INVALID_ARGUMENT = 2,
  PIGNN_STATUS_IO = 3,
  PIGNN_STATUS_FORMAT = 4,
  PIGNN_STATUS_NUMERICAL = 5,
  PIGNN_STATUS_BUFFER_TOO_SMALL = 6,
  PIGNN_STATUS_PANIC = 7,
} PignnStatus;

/**
 * Triangular mesh with boundary flags.
 */
typedef struct PignnMesh PignnMesh;

/**
 * Sequence of node fields at equally spaced times.
 */
typedef struct PignnSeries PignnSeries;

/**
 * Trained (or initialised) model bound to a problem and its mesh.
 */
typedef struct PignnSolver PignnSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from this thread.
 */
const char *pignn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pignn_version(void);

/**
 * Generates a jittered mesh of the rectangle `[x0, x1] x [y0, y1]`.
 */
enum PignnStatus pignn_mesh_generate(double x0,
                                     double y0,
                                     double x1,
                                     double y1,
                                     size_t density,
                                     double jitter,
                                     uint64_t seed,
                                     struct PignnMesh **out);

enum PignnStatus pignn_mesh_load(const char *path, struct PignnMesh **out);

enum PignnStatus pignn_mesh_save(const struct PignnMesh *mesh, const char *path);

enum PignnStatus pignn_mesh_node_count(const struct PignnMesh *mesh, size_t *out);

/**
 * Copies node coordinates as `x0, y0, x1, y1, ...` (`2 * node_count` values).
 */
enum PignnStatus pignn_mesh_coordinates(const struct PignnMesh *mesh, double *buf, size_t len);

/**
 * Copies boundary flags (1 boundary, 0 interior) into `buf` (`node_count` bytes).
 */
enum PignnStatus pignn_mesh_boundary_flags(const struct PignnMesh *mesh, uint8_t *buf, size_t len);

void pignn_mesh_free(struct PignnMesh *mesh);

/**
 * Loads a training checkpoint; inference uses the best-loss parameters.
 */
enum PignnStatus pignn_solver_load(const char *path, struct PignnSolver **out);

/**
 * Trains a forward model for `pde` (`heat`, `burgers`, `fn`) on `mesh`.
 * `latent` 0 keeps the default width.
 */
enum PignnStatus pignn_solver_train(const char *pde,
                                    const struct PignnMesh *mesh,
                                    size_t epochs,
                                    size_t steps,
                                    double dt,
                                    size_t latent,
                                    uint64_t seed,
                                    struct PignnSolver **out);

enum PignnStatus pignn_solver_save(const struct PignnSolver *solver, const char *path);

/**
 * Node count, solution components, and training step size.
 */
enum PignnStatus pignn_solver_info(const struct PignnSolver *solver,
                                   size_t *node_count,
                                   size_t *components,
                                   double *dt);

/**
 * Identified coefficient of an inverse model; `InvalidArgument` otherwise.
 */
enum PignnStatus pignn_solver_lambda(const struct PignnSolver *solver, double *out);

/**
 * Rolls the model `steps` steps of size `dt` (`dt <= 0`: training step size).
 */
enum PignnStatus pignn_solver_rollout(const struct PignnSolver *solver,
                                      size_t steps,
                                      double dt,
                                      struct PignnSeries **out);

/**
 * Closed-form solution of `pde` on the solver's mesh at the rollout times.
 */
enum PignnStatus pignn_solver_analytic(const struct PignnSolver *solver,
                                       size_t steps,
                                       double dt,
                                       struct PignnSeries **out);

void pignn_solver_free(struct PignnSolver *solver);

/**
 * Number of steps after the initial field, node count and components.
 */
enum PignnStatus pignn_series_shape(const struct PignnSeries *series,
                                    size_t *steps,
                                    size_t *node_count,
                                    size_t *components);

/**
 * Copies field `step` row-major (`node_count * components` values).
 */
enum PignnStatus pignn_series_field(const struct PignnSeries *series,
                                    size_t step,
                                    double *buf,
                                    size_t len);

/**
 * aRMSE curve for steps `1..=up_to` into `buf` (`up_to` values).
 */
enum PignnStatus pignn_armse(const struct PignnSeries *pred,
                             const struct PignnSeries *truth,
                             size_t up_to,
                             double *buf,
                             size_t len);

void pignn_series_free(struct PignnSeries *series);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIGNN_H */
