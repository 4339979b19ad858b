#ifndef LIQLAB_H
#define LIQLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  LIQLAB_STATUS_OK = 0,
  LIQLAB_STATUS_NULL_POINTER = 1,
  /**
   * Input rejected: parse error, unknown key or violated precondition.
   */
  LIQLAB_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The numerical method failed (singular system, rank-deficient regression, divergence).
   */
  LIQLAB_STATUS_NUMERICAL_FAILURE = 3,
  LIQLAB_STATUS_IO_ERROR = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  LIQLAB_STATUS_PANIC = 5,
} LiqlabStatus;

/**
 * Per-node arrays of a simulated bundle.
 */
typedef enum {
  LIQLAB_FIELD_S = 0,
  LIQLAB_FIELD_U = 1,
  LIQLAB_FIELD_V = 2,
  LIQLAB_FIELD_SIGMA = 3,
  LIQLAB_FIELD_M = 4,
  LIQLAB_FIELD_REALIZED_VARIANCE = 5,
} LiqlabField;

/**
 * Scenario configuration.
 */
typedef struct LiqlabConfig LiqlabConfig;

/**
 * Simulated paths, arrays `[node, path]`.
 */
typedef struct LiqlabPaths LiqlabPaths;

/**
 * Replication cost curve.
 */
typedef struct LiqlabReplication LiqlabReplication;

/**
 * Headline numbers of a replication run.
 */
typedef struct {
  double h0_limit;
  double h0_limit_stderr;
  double hprime0_analytic;
  double hprime0_analytic_stderr;
  double hprime0_fd;
  double hprime0_fd_stderr;
  double h0_loglog_slope;
  double impact_loglog_slope;
  size_t n_sizes;
} LiqlabReplicationSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, e.g. `liqlab 0.1.0`. Static; do not free.
 */
const char *liqlab_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next failing call.
 */
const char *liqlab_last_error(void);

/**
 * Default scenario.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
LiqlabStatus liqlab_config_new(LiqlabConfig **out);

/**
 * Parses scenario text (`key = value` lines under `[section]` headers).
 *
 * # Safety
 * `text` must be a nul-terminated string and `out` writable.
 */
LiqlabStatus liqlab_config_parse(const char *text, LiqlabConfig **out);

/**
 * Applies `key=value` or `section.key=value`.
 *
 * # Safety
 * `cfg` must come from this library; `assignment` must be nul-terminated.
 */
LiqlabStatus liqlab_config_set(LiqlabConfig *cfg, const char *assignment);

/**
 * Checks the scenario for `experiment` (`simulate`, `ledger`, `swaps`, `bsde`,
 * `replicate` or `arbitrage-test`).
 *
 * # Safety
 * `cfg` must come from this library; `experiment` must be nul-terminated.
 */
LiqlabStatus liqlab_config_validate(const LiqlabConfig *cfg, const char *experiment);

/**
 * Canonical text of the scenario; free with [`liqlab_string_free`].
 *
 * # Safety
 * `cfg` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_config_to_string(const LiqlabConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must come from this library or be null; it must not be used afterwards.
 */
void liqlab_config_free(LiqlabConfig *cfg);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void liqlab_string_free(char *s);

/**
 * Runs a subcommand exactly as the command-line tool does, writing into `out_dir`.
 *
 * # Safety
 * `cfg` must come from this library; the strings must be nul-terminated.
 */
LiqlabStatus liqlab_run(const LiqlabConfig *cfg, const char *command, const char *out_dir);

/**
 * Simulates `n_paths` paths of the scenario with its seed.
 *
 * # Safety
 * `cfg` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_simulate(const LiqlabConfig *cfg, LiqlabPaths **out);

/**
 * # Safety
 * `paths` must come from this library; the outputs must be writable.
 */
LiqlabStatus liqlab_paths_shape(const LiqlabPaths *paths, size_t *n_nodes, size_t *n_paths);

/**
 * Copies one field into `buf` in `[node, path]` row-major order; `len` must be
 * `n_nodes * n_paths`.
 *
 * # Safety
 * `paths` must come from this library and `buf` hold `len` doubles.
 */
LiqlabStatus liqlab_paths_copy(const LiqlabPaths *paths,
                               LiqlabField field,
                               double *buf,
                               size_t len);

/**
 * # Safety
 * `paths` must come from this library or be null.
 */
void liqlab_paths_free(LiqlabPaths *paths);

/**
 * Value at time `t` of swap `which` (1 or 2) given `U`, `V` and realized variance.
 *
 * # Safety
 * `cfg` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_swap_price(const LiqlabConfig *cfg,
                               uint32_t which,
                               double t,
                               double u,
                               double v,
                               double rv,
                               double *out);

/**
 * Replication cost curve over the scenario's sizes `xs`.
 *
 * # Safety
 * `cfg` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_replicate(const LiqlabConfig *cfg, LiqlabReplication **out);

/**
 * # Safety
 * `rep` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_replication_summary(const LiqlabReplication *rep,
                                        LiqlabReplicationSummary *out);

/**
 * Full report as JSON; free with [`liqlab_string_free`].
 *
 * # Safety
 * `rep` must come from this library and `out` be writable.
 */
LiqlabStatus liqlab_replication_json(const LiqlabReplication *rep, char **out);

/**
 * # Safety
 * `rep` must come from this library or be null.
 */
void liqlab_replication_free(LiqlabReplication *rep);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIQLAB_H */
