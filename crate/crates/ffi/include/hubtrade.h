#ifndef HUBTRADE_H
#define HUBTRADE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum HtStatus {
  HT_STATUS_OK = 0,
  /**
   * A subproblem or the market clearing is infeasible, or a numerical
   * failure stopped the run.
   */
  HT_STATUS_INFEASIBLE = 1,
  /**
   * The scenario file or the configuration is invalid.
   */
  HT_STATUS_CONFIG = 2,
  /**
   * Filesystem failure.
   */
  HT_STATUS_IO = 3,
  /**
   * A null pointer was passed where a value is required.
   */
  HT_STATUS_NULL_ARGUMENT = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  HT_STATUS_INTERNAL = 5,
} HtStatus;

/**
 * Opaque result handle for one finished run.
 */
typedef struct HtResult HtResult;

/**
 * Opaque scenario handle.
 */
typedef struct HtScenario HtScenario;

/**
 * Tunable subset of the run configuration. Zero/negative values keep the
 * scenario's own setting; `constant_gamma` below zero enables the full
 * tariff-design loop.
 */
typedef struct HtRunOptions {
  int64_t days;
  int64_t t_f;
  double eps;
  double sigma;
  double gamma0;
  double alpha0;
  double constant_gamma;
  bool oracle;
} HtRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated). Returns the full message length in bytes.
 */
uintptr_t ht_last_error_message(char *buf, uintptr_t len);

/**
 * Default run options: every field defers to the scenario file and the
 * tariff-design loop is enabled.
 */
struct HtRunOptions ht_run_options_default(void);

/**
 * Loads and validates a scenario file.
 */
enum HtStatus ht_scenario_load(const char *path, struct HtScenario **out);

/**
 * Builds a bundled scenario pack: 0 = the 33-bus five-hub pack, 1 = the
 * two-bus toy.
 */
enum HtStatus ht_scenario_builtin(uint32_t pack, uintptr_t days, struct HtScenario **out);

void ht_scenario_free(struct HtScenario *scenario);

uintptr_t ht_scenario_num_hubs(const struct HtScenario *scenario);

/**
 * Runs the rolling-horizon pipeline on a scenario.
 */
enum HtStatus ht_run(const struct HtScenario *scenario,
                     const struct HtRunOptions *options,
                     struct HtResult **out);

void ht_result_free(struct HtResult *result);

uintptr_t ht_result_num_windows(const struct HtResult *result);

/**
 * Designed tariff between two hubs in a window [CHF/kWh].
 */
enum HtStatus ht_result_gamma(const struct HtResult *result,
                              uintptr_t window,
                              uintptr_t hub_i,
                              uintptr_t hub_j,
                              double *out);

/**
 * Dispatch-level system cost of one window [CHF].
 */
enum HtStatus ht_result_system_cost(const struct HtResult *result, uintptr_t window, double *out);

/**
 * Summed absolute traded energy of one window [kWh].
 */
enum HtStatus ht_result_total_trades(const struct HtResult *result, uintptr_t window, double *out);

/**
 * Normalized cost reduction of one hub at the final settlement.
 */
enum HtStatus ht_result_reduction(const struct HtResult *result, uintptr_t hub, double *out);

/**
 * Writes every result table of the run into `dir` as CSV.
 */
enum HtStatus ht_result_export_csv(const struct HtResult *result, const char *dir);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* HUBTRADE_H */
