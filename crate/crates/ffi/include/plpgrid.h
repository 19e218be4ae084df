#ifndef PLPGRID_H
#define PLPGRID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PLP_STATUS_OK = 0,
  PLP_STATUS_NULL_POINTER = 1,
  PLP_STATUS_INVALID_ARGUMENT = 2,
  PLP_STATUS_IO = 3,
  PLP_STATUS_PARSE = 4,
  PLP_STATUS_VALIDATION = 5,
  PLP_STATUS_INFEASIBLE = 6,
  PLP_STATUS_NON_CONVERGENCE = 7,
  PLP_STATUS_OUT_OF_RANGE = 8,
  PLP_STATUS_PANIC = 9,
} PlpStatus;

/**
 * A loaded scenario.
 */
typedef struct PlpScenario PlpScenario;

/**
 * Rows of a switch plan or DER sweep, sorted by key.
 */
typedef struct PlpTable PlpTable;

typedef struct {
  /**
   * Switch count, or added DER MW.
   */
  double key;
  double served;
  /**
   * $/MWh.
   */
  double price;
  /**
   * MWh/yr.
   */
  double energy;
  /**
   * $/yr.
   */
  double total_cost;
  /**
   * $/yr.
   */
  double welfare;
} PlpRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *plp_last_error(void);

/**
 * Loads a scenario TOML file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` points to writable storage.
 */
PlpStatus plp_scenario_load(const char *path, PlpScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `text` is a NUL-terminated string; `out` points to writable storage.
 */
PlpStatus plp_scenario_parse(const char *text, PlpScenario **out);

/**
 * # Safety
 * `scenario` is null or a handle from `plp_scenario_load`, not yet freed.
 */
void plp_scenario_free(PlpScenario *scenario);

/**
 * Hex sha256 of the scenario, owned by the handle.
 *
 * # Safety
 * `scenario` is null or a live handle.
 */
const char *plp_scenario_digest(const PlpScenario *scenario);

/**
 * Annualized cost of an asset: capital recovered over `lifetime` years at
 * `discount_rate`, plus the yearly operating cost.
 *
 * # Safety
 * `out` points to writable storage.
 */
PlpStatus plp_annualize_cost(double capital,
                             double operating,
                             double discount_rate,
                             double lifetime,
                             double *out);

/**
 * Best switch set for each count in `k_min..=k_max` over the scenario's
 * uninstalled candidates.
 *
 * # Safety
 * `scenario` is a live handle; `out` points to writable storage.
 */
PlpStatus plp_plan_switches(const PlpScenario *scenario,
                            size_t k_min,
                            size_t k_max,
                            PlpTable **out);

/**
 * Unit price for `count` added capacities `start + i·step` MW at DER site
 * `site_id`.
 *
 * # Safety
 * `scenario` is a live handle, `site_id` a NUL-terminated string and `out`
 * points to writable storage.
 */
PlpStatus plp_sweep_der(const PlpScenario *scenario,
                        const char *site_id,
                        double start,
                        double step,
                        size_t count,
                        PlpTable **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `table` is null or a live handle.
 */
size_t plp_table_len(const PlpTable *table);

/**
 * # Safety
 * `table` is a live handle; `out` points to writable storage.
 */
PlpStatus plp_table_row(const PlpTable *table, size_t index, PlpRow *out);

/**
 * Location label of a row (switch ids or DER site id), owned by the table;
 * null when out of range.
 *
 * # Safety
 * `table` is null or a live handle.
 */
const char *plp_table_locations(const PlpTable *table, size_t index);

/**
 * # Safety
 * `table` is null or a handle from this library, not yet freed.
 */
void plp_table_free(PlpTable *table);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLPGRID_H */
