#ifndef DIFREG_H
#define DIFREG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DFR_ACTION_GEOMETRIC 0

#define DFR_ACTION_MASS 1

#define DFR_ACTION_SQRT_MASS 2

#define DFR_SIMILARITY_L2 0

#define DFR_SIMILARITY_CC 1

#define DFR_MODE_INDIRECT 0

#define DFR_MODE_DIRECT 1

#define DFR_TEMPLATE_GEOMETRIC 0

#define DFR_TEMPLATE_MASS 1

#define DFR_SHAPE_DISK 0

#define DFR_SHAPE_RECT 1

typedef enum DfrStatus {
  DFR_STATUS_OK = 0,
  DFR_STATUS_INVALID_ARGUMENT = 1,
  DFR_STATUS_SHAPE_MISMATCH = 2,
  DFR_STATUS_DEGENERATE = 3,
  DFR_STATUS_PARSE = 4,
  DFR_STATUS_IO = 5,
  DFR_STATUS_NULL_POINTER = 6,
  DFR_STATUS_PANIC = 7,
} DfrStatus;

/**
 * Opaque 2-D field of doubles.
 */
typedef struct DfrField DfrField;

/**
 * Opaque result of a registration run.
 */
typedef struct DfrRegistration DfrRegistration;

typedef struct DfrNoise {
  double max_intensity;
  bool poisson;
  bool quantize;
  double gaussian_std;
  uint64_t seed;
} DfrNoise;

typedef struct DfrRunConfig {
  double sigma;
  double eta;
  double gamma;
  size_t n_steps;
  double cap;
  size_t max_iter;
  /**
   * One of `DFR_ACTION_*`.
   */
  uint32_t action;
  /**
   * One of `DFR_SIMILARITY_*`.
   */
  uint32_t similarity;
  /**
   * One of `DFR_MODE_*`.
   */
  uint32_t mode;
  /**
   * Grid spacing; zero or negative selects the unit torus.
   */
  double spacing;
} DfrRunConfig;

typedef struct DfrErHioConfig {
  double beta;
  double shrinkwrap_threshold;
  size_t shrinkwrap_every;
  size_t restarts;
  uint64_t seed;
  double support_threshold;
} DfrErHioConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dfr_version(void);

/**
 * Message for the last failed call on this thread. Valid until the next
 * failing call on the same thread; empty if nothing failed yet.
 */
const char *dfr_last_error_message(void);

/**
 * New field of `rows * cols` values copied from `data`, or zeros if `data` is null.
 */
enum DfrStatus dfr_field_new(size_t rows, size_t cols, const double *data, struct DfrField **out);

void dfr_field_free(struct DfrField *field);

/**
 * Row count, or 0 for a null handle.
 */
size_t dfr_field_rows(const struct DfrField *field);

/**
 * Column count, or 0 for a null handle.
 */
size_t dfr_field_cols(const struct DfrField *field);

/**
 * Borrowed pointer to the row-major values; valid while the handle lives.
 */
const double *dfr_field_data(const struct DfrField *field);

enum DfrStatus dfr_field_read(const char *path, struct DfrField **out);

enum DfrStatus dfr_field_write(const struct DfrField *field, const char *path);

/**
 * Noiseless defaults at peak intensity 100.
 */
enum DfrStatus dfr_noise_default(struct DfrNoise *out);

/**
 * Diffraction amplitudes of `target` under `noise`. `out_snr` may be null.
 */
enum DfrStatus dfr_simulate(const struct DfrField *target,
                            const struct DfrNoise *noise,
                            struct DfrField **out_data,
                            double *out_snr);

/**
 * Template from amplitudes. `ratio` is used only for `DFR_TEMPLATE_GEOMETRIC`,
 * `aspect` only for `DFR_SHAPE_RECT`.
 */
enum DfrStatus dfr_template_estimate(const struct DfrField *data,
                                     uint32_t mode,
                                     double ratio,
                                     uint32_t shape,
                                     double aspect,
                                     double threshold,
                                     struct DfrField **out);

enum DfrStatus dfr_run_config_default(struct DfrRunConfig *out);

/**
 * Register `template` against amplitudes (indirect) or a target image (direct).
 */
enum DfrStatus dfr_register(const struct DfrField *template_,
                            const struct DfrField *data,
                            const struct DfrRunConfig *config,
                            struct DfrRegistration **out);

void dfr_registration_free(struct DfrRegistration *reg);

/**
 * Copy of the reconstructed image; release with `dfr_field_free`.
 */
enum DfrStatus dfr_registration_reconstruction(const struct DfrRegistration *reg,
                                               struct DfrField **out);

/**
 * Number of recorded iterations, or 0 for a null handle.
 */
size_t dfr_registration_iterations(const struct DfrRegistration *reg);

/**
 * Energies recorded at `iteration`. Any output pointer may be null.
 */
enum DfrStatus dfr_registration_energy(const struct DfrRegistration *reg,
                                       size_t iteration,
                                       double *total,
                                       double *e1,
                                       double *e2);

enum DfrStatus dfr_registration_path_distance(const struct DfrRegistration *reg, double *out);

enum DfrStatus dfr_erhio_config_default(struct DfrErHioConfig *out);

/**
 * ER/HIO with shrinkwrap. `schedule` (e.g. "ER50HIO100x20") and `truth` may
 * be null. Writes the best restart's reconstruction and, when `truth` is
 * given and `out_error` is non-null, its error.
 */
enum DfrStatus dfr_erhio(const struct DfrField *data,
                         const char *schedule,
                         const struct DfrErHioConfig *config,
                         const struct DfrField *truth,
                         struct DfrField **out,
                         double *out_error);

/**
 * Relative error after the best whole-pixel shift and point inversion.
 */
enum DfrStatus dfr_recon_error(const struct DfrField *recon,
                               const struct DfrField *truth,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFREG_H */
