#ifndef REWIND_GUARD_H
#define REWIND_GUARD_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum RgStatus {
  RG_STATUS_OK = 0,
  RG_STATUS_NULL_POINTER = 1,
  RG_STATUS_INVALID_ARGUMENT = 2,
  RG_STATUS_DIMENSION = 3,
  RG_STATUS_DATA = 4,
  RG_STATUS_CONFIG = 5,
  RG_STATUS_PROTOCOL = 6,
  RG_STATUS_IO = 7,
  RG_STATUS_PANIC = 8,
} RgStatus;

// Temporal ensembler over overlapping action chunks.
typedef struct RgEnsembler RgEnsembler;

// Online guard: ensembling, failure detection and checkpoint respawning.
typedef struct RgGuard RgGuard;

// One TIDE score. `valid` is false when the plan held no prior prediction.
typedef struct RgTide {
  double value;
  bool valid;
} RgTide;

// Per-step guard decision.
typedef struct RgStep {
  uint64_t t;
  struct RgTide tide;
  bool flagged;
  bool recovered;
  bool respawning;
  // Zero-based latest peaked slot, or -1 when none has peaked.
  int64_t k_star;
} RgStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL.
//
// The pointer stays valid until the next failing call on the same thread.
const char *rg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *rg_version(void);

// Split-conformal threshold of `n` calibration scores at miscoverage `alpha`.
//
// Writes `INFINITY` when the corpus is too small for the requested rate.
//
// # Safety
// `scores` must point to `n` readable doubles; `out_q_hat` must be writable.
enum RgStatus rg_cp_threshold(const double *scores, size_t n, double alpha, double *out_q_hat);

// Reads `q_hat` from a threshold file written by `rewind-guard calibrate`.
//
// # Safety
// `path` must be a NUL-terminated string; `out_q_hat` must be writable.
enum RgStatus rg_threshold_load(const char *path, double *out_q_hat);

// TIDE between an aggregated plan and a fresh chunk.
//
// `plan` is `batch x overlap x action_dim`, `weights` has `overlap` entries
// (zero marks a step with no prediction) and `chunk` is
// `batch x horizon x action_dim` with `horizon >= overlap`.
//
// # Safety
// Each array must hold the number of doubles implied by its shape;
// `out` must be writable.
enum RgStatus rg_tide(const double *plan,
                      const double *weights,
                      size_t batch,
                      size_t overlap,
                      size_t action_dim,
                      const double *chunk_values,
                      size_t horizon,
                      struct RgTide *out);

// Creates an ensembler with weights `exp(-m * age)`.
//
// # Safety
// `out` must be writable. Release the handle with [`rg_ensembler_free`].
enum RgStatus rg_ensembler_new(size_t batch,
                               size_t horizon,
                               size_t action_dim,
                               size_t overlap,
                               double m,
                               struct RgEnsembler **out);

// Scores a fresh chunk against the current plan, merges it and advances.
//
// The executed action (`batch x action_dim`) goes to `out_action`.
// `out_tide` may be NULL.
//
// # Safety
// `h` must come from [`rg_ensembler_new`]; buffers must hold the stated
// number of doubles.
enum RgStatus rg_ensembler_push(struct RgEnsembler *h,
                                const double *chunk_values,
                                size_t chunk_len,
                                double *out_action,
                                size_t action_len,
                                struct RgTide *out_tide);

// Drops every pending prediction.
//
// # Safety
// `h` must come from [`rg_ensembler_new`].
enum RgStatus rg_ensembler_reset(struct RgEnsembler *h);

// # Safety
// `h` must come from [`rg_ensembler_new`] and not be used afterwards. NULL is a no-op.
void rg_ensembler_free(struct RgEnsembler *h);

// Opens a guard over a checkpoint database file.
//
// `config_json` is a JSON guard configuration; NULL selects the defaults.
// `q_hat` is the detection threshold, e.g. from [`rg_threshold_load`].
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable. Release the handle
// with [`rg_guard_free`].
enum RgStatus rg_guard_open(const char *config_json,
                            const char *database_path,
                            double q_hat,
                            size_t batch,
                            size_t action_dim,
                            struct RgGuard **out);

// Number of checkpoint slots tracked by the guard, or 0 for NULL.
//
// # Safety
// `h` must be NULL or come from [`rg_guard_open`].
size_t rg_guard_num_slots(const struct RgGuard *h);

// Enables or disables respawning; flags are still reported when disabled.
//
// # Safety
// `h` must come from [`rg_guard_open`].
enum RgStatus rg_guard_set_intervention(struct RgGuard *h, bool on);

// Runs one control step: the policy's chunk and the current feature vector
// in, the command to execute out.
//
// `out_action` receives `batch x action_dim` values. `out_step` may be NULL.
//
// # Safety
// `h` must come from [`rg_guard_open`]; buffers must hold the stated number
// of doubles.
enum RgStatus rg_guard_step(struct RgGuard *h,
                            const double *chunk_values,
                            size_t chunk_len,
                            const double *feature,
                            size_t feature_len,
                            double *out_action,
                            size_t action_len,
                            struct RgStep *out_step);

// Cosine similarities of the last step's feature to each slot template.
//
// # Safety
// `h` must come from [`rg_guard_open`]; `out` must hold `len` doubles.
enum RgStatus rg_guard_similarities(const struct RgGuard *h, double *out, size_t len);

// Ends a respawn early once the system has reached the checkpoint.
//
// # Safety
// `h` must come from [`rg_guard_open`].
enum RgStatus rg_guard_respawn_reached(struct RgGuard *h);

// # Safety
// `h` must come from [`rg_guard_open`] and not be used afterwards. NULL is a no-op.
void rg_guard_free(struct RgGuard *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REWIND_GUARD_H */
