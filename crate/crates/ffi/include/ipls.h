#ifndef IPLS_H
#define IPLS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IplsError {
  IPLS_ERROR_OK = 0,
  IPLS_ERROR_NULL_POINTER = 1,
  IPLS_ERROR_INVALID_ARGUMENT = 2,
  IPLS_ERROR_CONFIG = 3,
  IPLS_ERROR_IO = 4,
  IPLS_ERROR_RUNTIME = 5,
  IPLS_ERROR_BUFFER_TOO_SMALL = 6,
  IPLS_ERROR_PANIC = 7,
} IplsError;

/**
 * Partition-to-holder registry.
 */
typedef struct IplsPartitionTable IplsPartitionTable;

/**
 * Metrics of a finished run.
 */
typedef struct IplsRun IplsRun;

/**
 * Scenario configuration.
 */
typedef struct IplsScenario IplsScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Free with
 * [`ipls_string_free`].
 */
char *ipls_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void ipls_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ipls_version(void);

/**
 * Variant `index` of a named preset.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum IplsError ipls_scenario_from_preset(const char *name,
                                         uintptr_t index,
                                         struct IplsScenario **out);

/**
 * Number of variants of a named preset, 0 when unknown.
 *
 * # Safety
 * `name` must be a NUL-terminated string.
 */
uintptr_t ipls_preset_variant_count(const char *name);

/**
 * Parses `key = value` config text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum IplsError ipls_scenario_from_config(const char *text, struct IplsScenario **out);

/**
 * Overrides one key.
 *
 * # Safety
 * `scenario` must be a live handle; `key` and `value` NUL-terminated.
 */
enum IplsError ipls_scenario_set(struct IplsScenario *scenario, const char *key, const char *value);

/**
 * Canonical config text of the scenario.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum IplsError ipls_scenario_to_text(const struct IplsScenario *scenario, char **out);

/**
 * # Safety
 * `scenario` must come from this library, or be null.
 */
void ipls_scenario_free(struct IplsScenario *scenario);

/**
 * Runs the decentralized simulation. Relative dataset paths resolve against
 * `IPLS_DATA_DIR`.
 *
 * # Safety
 * `scenario` must be a live handle; `out` must be writable.
 */
enum IplsError ipls_scenario_run(const struct IplsScenario *scenario, struct IplsRun **out);

/**
 * Metrics CSV of the run.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum IplsError ipls_run_csv(const struct IplsRun *run, char **out);

/**
 * Number of global rows, including round 0.
 *
 * # Safety
 * `run` must be a live handle or null.
 */
uint32_t ipls_run_round_count(const struct IplsRun *run);

/**
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum IplsError ipls_run_final_accuracy(const struct IplsRun *run, double *out);

/**
 * # Safety
 * `run` must come from this library, or be null.
 */
void ipls_run_free(struct IplsRun *run);

/**
 * Table in which `initiator` holds all `k` partitions.
 *
 * # Safety
 * `out` must be writable.
 */
enum IplsError ipls_table_bootstrap(uint32_t k,
                                    uint32_t pi,
                                    uint32_t rho,
                                    uint32_t initiator,
                                    struct IplsPartitionTable **out);

/**
 * Admits `agent`; the partitions it obtained (ascending) go to `assigned`.
 * An empty result means the agent trains without holding anything.
 *
 * # Safety
 * `table` must be a live handle; `assigned` must have room for `cap` values;
 * `len` must be writable.
 */
enum IplsError ipls_table_join(struct IplsPartitionTable *table,
                               uint32_t agent,
                               uint32_t *assigned,
                               uintptr_t cap,
                               uintptr_t *len);

/**
 * Holders of `partition`, ascending.
 *
 * # Safety
 * `table` must be a live handle; `holders` must have room for `cap` values;
 * `len` must be writable.
 */
enum IplsError ipls_table_lookup(const struct IplsPartitionTable *table,
                                 uint32_t partition,
                                 uint32_t *holders,
                                 uintptr_t cap,
                                 uintptr_t *len);

/**
 * Canonical text form of the table.
 *
 * # Safety
 * `table` must be a live handle; `out` must be writable.
 */
enum IplsError ipls_table_to_text(const struct IplsPartitionTable *table, char **out);

/**
 * # Safety
 * `table` must come from this library, or be null.
 */
void ipls_table_free(struct IplsPartitionTable *table);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IPLS_H */
