#ifndef MAME_H
#define MAME_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MAME_STATUS_OK = 0,
  MAME_STATUS_NULL_POINTER = 1,
  MAME_STATUS_INVALID_ARGUMENT = 2,
  MAME_STATUS_BUFFER_TOO_SMALL = 3,
  MAME_STATUS_IO = 4,
  MAME_STATUS_FORMAT = 5,
  MAME_STATUS_CONFIG = 6,
  MAME_STATUS_DIMENSION = 7,
  MAME_STATUS_NUMERIC = 8,
  MAME_STATUS_STAIRCASE = 9,
  MAME_STATUS_PANIC = 10,
} MameStatus;

typedef enum {
  MAME_TAP_EARLY = 0,
  MAME_TAP_MID = 1,
  MAME_TAP_LATE = 2,
} MameTap;

typedef struct MameBackbone MameBackbone;

typedef struct MameIcaModel MameIcaModel;

typedef struct MameStaircase MameStaircase;

typedef struct {
  double learning_rate;
  size_t iterations;
  double stop_loss;
  // Seconds; zero or negative means no limit.
  double time_budget;
} MameSynthesisOptions;

typedef struct {
  double final_loss;
  size_t iterations;
  double elapsed;
  bool converged;
} MameSynthesisReport;

typedef struct {
  double current_target;
  size_t trial_count;
  size_t reversal_count;
  bool converged;
} MameStaircaseState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message, NUL-terminated and
// truncated to fit, into `buf`. Returns the buffer size the full message
// needs, or 0 when there is no error. `buf` may be null to query the size.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t mame_last_error(char *buf, size_t len);

void mame_clear_error(void);

// Library version as a static NUL-terminated string.
const char *mame_version(void);

// The 64×64×3 desk backbone with weights drawn from `seed`.
//
// # Safety
// `out_handle` must be a valid pointer to write the handle to.
MameStatus mame_backbone_new_desk(uint64_t seed, MameBackbone **out_handle);

// The desk backbone with weights read from a weights file.
//
// # Safety
// `weights_path` must be a NUL-terminated string; `out_handle` must be valid.
MameStatus mame_backbone_load(const char *weights_path, MameBackbone **out_handle);

// # Safety
// `backbone` must be a valid handle; `weights_path` NUL-terminated.
MameStatus mame_backbone_save(const MameBackbone *backbone, const char *weights_path);

// Input height, width and channel count.
//
// # Safety
// `backbone` must be a valid handle and the outputs writable.
MameStatus mame_backbone_input_shape(const MameBackbone *backbone,
                                     size_t *height,
                                     size_t *width,
                                     size_t *channels);

// Packed Gram features of `pixels` at `tap`. `*written` receives the
// feature length even when the buffer is too small.
//
// # Safety
// `pixels` must hold the backbone's input size; `features` must hold
// `capacity` doubles.
MameStatus mame_gram_features(const MameBackbone *backbone,
                              const double *pixels,
                              MameTap tap,
                              double *features,
                              size_t capacity,
                              size_t *written);

// # Safety
// `backbone` must be null or a handle not yet freed.
void mame_backbone_free(MameBackbone *backbone);

// Fits FastICA on `rows × cols` row-major features and keeps the `select`
// components with the largest explained variance.
//
// # Safety
// `features` must hold `rows * cols` doubles; `out_handle` must be valid.
MameStatus mame_ica_fit(const double *features,
                        size_t rows,
                        size_t cols,
                        MameTap tap,
                        size_t n_components,
                        size_t select,
                        uint64_t seed,
                        MameIcaModel **out_handle);

// # Safety
// `model_path` must be NUL-terminated; its metadata sidecar must exist.
MameStatus mame_ica_load(const char *model_path, MameIcaModel **out_handle);

// # Safety
// `model` must be a valid handle; `model_path` NUL-terminated.
MameStatus mame_ica_save(const MameIcaModel *model, const char *model_path);

// Tap the model was fitted on, and the count of selected components.
//
// # Safety
// `model` must be a valid handle and the outputs writable.
MameStatus mame_ica_info(const MameIcaModel *model, MameTap *tap, size_t *selected);

// Values of the selected components for `pixels`, in selection order.
//
// # Safety
// `pixels` must hold the backbone's input size; `values` must hold
// `capacity` doubles.
MameStatus mame_ica_components(const MameBackbone *backbone,
                               const MameIcaModel *model,
                               const double *pixels,
                               double *values,
                               size_t capacity);

// # Safety
// `model` must be null or a handle not yet freed.
void mame_ica_free(MameIcaModel *model);

// Default optimizer settings.
MameSynthesisOptions mame_synthesis_defaults(void);

// Moves selected component `component` of `reference` by `direction · target`
// (`direction` is +1 or −1) and writes the synthesized image to `result`.
//
// # Safety
// `reference` and `result` must each hold the backbone's input size;
// `options` may be null for defaults; `report` may be null.
MameStatus mame_synthesize(const MameBackbone *backbone,
                           const MameIcaModel *model,
                           const double *reference,
                           size_t component,
                           int32_t direction,
                           double target,
                           const MameSynthesisOptions *options,
                           double *result,
                           size_t capacity,
                           MameSynthesisReport *report);

// A 2-up-1-down staircase. `initial` NaN starts at the midpoint of
// `[range_min, range_max]`.
//
// # Safety
// `out_handle` must be valid.
MameStatus mame_staircase_new(double step,
                              double range_min,
                              double range_max,
                              double initial,
                              size_t reversal_quota,
                              MameStaircase **out_handle);

// Records one trial. Gaze-invalid trials only increase the trial count.
//
// # Safety
// `staircase` must be a valid handle.
MameStatus mame_staircase_update(MameStaircase *staircase, bool correct, bool gaze_valid);

// # Safety
// `staircase` must be a valid handle and `state` writable.
MameStatus mame_staircase_state(const MameStaircase *staircase, MameStaircaseState *state);

// Mean of the last quota reversals.
//
// # Safety
// `staircase` must be a valid handle and `threshold` writable.
MameStatus mame_staircase_threshold(const MameStaircase *staircase, double *threshold);

// # Safety
// `staircase` must be null or a handle not yet freed.
void mame_staircase_free(MameStaircase *staircase);

// RMS contrast of the luma difference `perturbed − reference`.
//
// # Safety
// Both images must hold `height * width * channels` doubles.
MameStatus mame_rms_difference(const double *perturbed,
                               const double *reference,
                               size_t height,
                               size_t width,
                               size_t channels,
                               double *value);

// Mean SSIM of the luma images with the default 11×11 Gaussian window.
//
// # Safety
// Both images must hold `height * width * channels` doubles.
MameStatus mame_ssim(const double *a,
                     const double *b,
                     size_t height,
                     size_t width,
                     size_t channels,
                     double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAME_H */
