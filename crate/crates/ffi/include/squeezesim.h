#ifndef SQUEEZESIM_H
#define SQUEEZESIM_H

#pragma once

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SqzStatus {
  SQZ_STATUS_OK = 0,
  SQZ_STATUS_NULL_POINTER = 1,
  SQZ_STATUS_INVALID_ARGUMENT = 2,
  SQZ_STATUS_ABOVE_THRESHOLD = 3,
  SQZ_STATUS_THRESHOLD_UNREACHABLE = 4,
  SQZ_STATUS_CONFIG = 5,
  SQZ_STATUS_FIT_FAILED = 6,
  SQZ_STATUS_BUFFER_TOO_SMALL = 7,
  SQZ_STATUS_IO = 8,
  SQZ_STATUS_PANIC = 9,
  SQZ_STATUS_INTERNAL = 10,
} SqzStatus;

// Opaque simulator handle.
typedef struct SqzSimulator SqzSimulator;

// Plain parameter set for [`sqz_simulator_new`].
typedef struct SqzParams {
  double wavelength_nm;
  double q_intrinsic;
  double q_loaded;
  double fsr_hz;
  // rad/s
  double d2;
  // rad/s
  double g0;
  // Fixed pump detuning in units of the loaded linewidth.
  double delta_over_kappa;
  double eta_total;
  int32_t mode_index;
} SqzParams;

typedef struct SqzExtrema {
  double s_min_db;
  double s_max_db;
  double theta_opt;
} SqzExtrema;

typedef struct SqzSweepPoint {
  double power_w;
  double rho;
  // NaN when above threshold.
  double s_min_db;
  double s_max_db;
  bool above_threshold;
} SqzSweepPoint;

typedef struct SqzFit {
  double center_nm;
  double linewidth_pm;
  double extinction;
  double q_loaded;
  double q_intrinsic;
  double q_coupling;
  double eta;
  double fit_rms;
} SqzFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error of this thread into `buf` (NUL-terminated,
// truncated to fit) and returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sqz_last_error_message(char *buf, size_t len);

// # Safety
// `out` must be null or writable.
enum SqzStatus sqz_escape_efficiency(double q_intrinsic, double q_loaded, double *out);

// # Safety
// `out` must be null or writable.
enum SqzStatus sqz_max_onchip_squeezing_db(double eta, double *out);

// Builds a simulator with a fixed detuning and the adiabatic-upsweep branch.
//
// # Safety
// `params` must point to a valid [`SqzParams`]; `out` must be writable.
enum SqzStatus sqz_simulator_new(const struct SqzParams *params, struct SqzSimulator **out);

// Builds a simulator from the text of a TOML run configuration (g0
// calibration included).
//
// # Safety
// `toml` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum SqzStatus sqz_simulator_from_config(const char *toml, struct SqzSimulator **out);

// # Safety
// `sim` must be null or a handle from this library not yet freed.
void sqz_simulator_free(struct SqzSimulator *sim);

// Calibrated (or given) g0 of the handle, rad/s.
//
// # Safety
// `sim` must be a live handle; `out` must be writable.
enum SqzStatus sqz_simulator_g0(const struct SqzSimulator *sim, double *out);

// Threshold power (W) and intracavity photon number of the pair.
//
// # Safety
// `sim` must be a live handle; the out-pointers must be writable.
enum SqzStatus sqz_threshold(const struct SqzSimulator *sim, double *power_w, double *rho);

// Detected homodyne variance (shot noise = 1) at LO phase `theta`.
//
// # Safety
// `sim` must be a live handle; `out` must be writable.
enum SqzStatus sqz_variance(const struct SqzSimulator *sim,
                            double power_w,
                            double omega,
                            double theta,
                            double *out);

// Squeezed and anti-squeezed levels (signed dB) and the optimal LO phase.
//
// # Safety
// `sim` must be a live handle; `out` must be writable.
enum SqzStatus sqz_quadratures(const struct SqzSimulator *sim,
                               double power_w,
                               double omega,
                               struct SqzExtrema *out);

// Power sweep; `out` receives `n` points in input order.
//
// # Safety
// `powers_w` must point to `n` readable doubles and `out` to `n` writable
// points (either may be null when `n == 0`).
enum SqzStatus sqz_sweep(const struct SqzSimulator *sim,
                         const double *powers_w,
                         size_t n,
                         double omega,
                         struct SqzSweepPoint *out);

// Detects and fits every resonance of a transmission trace. `count`
// receives the number of fits; if it exceeds `capacity` nothing is written
// to `out` and `BufferTooSmall` is returned. Resonances whose fit fails
// are skipped.
//
// # Safety
// `wavelength_nm` and `transmission` must point to `n` readable doubles,
// `out` to `capacity` writable fits, `count` must be writable.
enum SqzStatus sqz_fit_trace(const double *wavelength_nm,
                             const double *transmission,
                             size_t n,
                             double min_prominence,
                             double min_spacing_nm,
                             struct SqzFit *out,
                             size_t capacity,
                             size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SQUEEZESIM_H */
