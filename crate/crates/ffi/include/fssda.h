#ifndef FSSDA_H
#define FSSDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FssdaStatus {
  FSSDA_STATUS_OK = 0,
  FSSDA_STATUS_NULL_POINTER = 1,
  FSSDA_STATUS_INVALID_UTF8 = 2,
  FSSDA_STATUS_INVALID_ARGUMENT = 3,
  FSSDA_STATUS_SHAPE_MISMATCH = 4,
  FSSDA_STATUS_CONFIG = 5,
  FSSDA_STATUS_PARTITION = 6,
  FSSDA_STATUS_IO = 7,
  FSSDA_STATUS_OUT_OF_RANGE = 8,
  FSSDA_STATUS_PANIC = 9,
} FssdaStatus;

typedef enum FssdaCommand {
  // Every configured method on every pair, mode and seed.
  FSSDA_COMMAND_RUN = 0,
  // Fixed imitation weights against the adaptive rule.
  FSSDA_COMMAND_SWEEP_LAMBDA = 1,
  // Multi-source training next to each single source.
  FSSDA_COMMAND_MULTISOURCE = 2,
} FssdaCommand;

// An experiment configuration.
typedef struct FssdaConfig FssdaConfig;

// Results of a finished command.
typedef struct FssdaReport FssdaReport;

// Model shape. `hidden_dim` 0 selects the linear softmax model.
typedef struct FssdaModelSpec {
  size_t input_dim;
  size_t hidden_dim;
  size_t num_classes;
} FssdaModelSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on this thread.
const char *fssda_last_error_message(void);

// Number of parameters of a model of this shape.
//
// # Safety
// `spec` and `out` must be valid pointers.
enum FssdaStatus fssda_model_num_params(const struct FssdaModelSpec *spec, size_t *out);

// The default configuration.
//
// # Safety
// `out` must be a valid pointer; on success it receives a new handle.
enum FssdaStatus fssda_config_default(struct FssdaConfig **out);

// Parses a TOML configuration; keys it omits take their defaults.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum FssdaStatus fssda_config_from_toml(const char *text, struct FssdaConfig **out);

// Applies one `section.key=value` override. The handle is unchanged on error.
//
// # Safety
// `config` must be a live handle and `assignment` a NUL-terminated string.
enum FssdaStatus fssda_config_set(struct FssdaConfig *config, const char *assignment);

// # Safety
// `config` must be null or a handle not yet freed.
void fssda_config_free(struct FssdaConfig *config);

// Runs a command. With a non-null `out_dir`, curve and summary files are
// written there as the CLI would.
//
// # Safety
// `config` must be a live handle, `out_dir` null or a NUL-terminated path,
// and `out` a valid pointer; on success it receives a new handle.
enum FssdaStatus fssda_run(const struct FssdaConfig *config,
                           enum FssdaCommand command,
                           const char *out_dir,
                           struct FssdaReport **out);

// Number of summary rows, one per (method, pair, mode).
//
// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum FssdaStatus fssda_report_row_count(const struct FssdaReport *report, size_t *out);

// Labels and statistics of summary row `index`. The strings are owned by
// the report. Any output pointer may be null to skip it.
//
// # Safety
// `report` must be a live handle; non-null outputs must be valid pointers.
enum FssdaStatus fssda_report_row(const struct FssdaReport *report,
                                  size_t index,
                                  const char **method,
                                  const char **pair,
                                  const char **mode,
                                  size_t *seeds,
                                  double *mean_acc,
                                  double *std_acc);

// The summary as a text table, owned by the report.
//
// # Safety
// `report` must be a live handle; the result is null for a null handle.
const char *fssda_report_summary_text(const struct FssdaReport *report);

// # Safety
// `report` must be null or a handle not yet freed.
void fssda_report_free(struct FssdaReport *report);

// Hard-label weight λ minimizing `‖λ·g_hard + (1 − λ)·g_soft‖²` on [0, 1].
// Both gradients hold `fssda_model_num_params(spec)` values.
//
// # Safety
// `spec` and `out` must be valid; each gradient must point to `len` values.
enum FssdaStatus fssda_adaptive_lambda(const struct FssdaModelSpec *spec,
                                       const double *grad_hard,
                                       const double *grad_soft,
                                       size_t len,
                                       double *out);

// Simplex weights minimizing `‖Σ w_i g_i‖²` by Frank-Wolfe. `gradients`
// holds `count` row-major vectors of `len` values; `weights_out` receives
// `count` weights and `objective_out`, if non-null, the final objective.
//
// # Safety
// `spec` must be valid, `gradients` must point to `count * len` values and
// `weights_out` to room for `count`.
enum FssdaStatus fssda_frank_wolfe(const struct FssdaModelSpec *spec,
                                   const double *gradients,
                                   size_t count,
                                   size_t len,
                                   size_t max_iters,
                                   double tol,
                                   bool normalize,
                                   double *weights_out,
                                   double *objective_out);

// Row-wise softmax of `logits / temperature` for a `rows × cols` row-major
// matrix. `out` may alias `logits`.
//
// # Safety
// `logits` and `out` must each point to `rows * cols` values.
enum FssdaStatus fssda_softmax_t(const double *logits,
                                 size_t rows,
                                 size_t cols,
                                 double temperature,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSSDA_H */
