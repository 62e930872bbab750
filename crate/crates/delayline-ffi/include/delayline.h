#ifndef DELAYLINE_H
#define DELAYLINE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DlCommand {
  DL_COMMAND_EVOLVE = 0,
  DL_COMMAND_CORRELATE = 1,
  DL_COMMAND_G2 = 2,
  DL_COMMAND_ORACLE = 3,
  DL_COMMAND_TELEPORT = 4,
} DlCommand;

/**
 * Status codes. Values 3 to 7 coincide with the CLI exit codes.
 */
typedef enum DlStatus {
  DL_STATUS_OK = 0,
  DL_STATUS_NULL_POINTER = 1,
  DL_STATUS_INVALID_UTF8 = 2,
  DL_STATUS_PARSE = 3,
  DL_STATUS_VALIDATION = 4,
  DL_STATUS_RESOURCE_CAP = 5,
  DL_STATUS_COMPUTATION = 6,
  DL_STATUS_IO = 7,
  DL_STATUS_OUT_OF_RANGE = 8,
  DL_STATUS_PANIC = 9,
} DlStatus;

/**
 * A parsed run configuration.
 */
typedef struct DlConfig DlConfig;

/**
 * Tables and diagnostics produced by one command.
 */
typedef struct DlResult DlResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *dl_version(void);

/**
 * JSON description of the last failure on this thread, or null.
 * The returned string must be released with `dl_string_free`.
 */
char *dl_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void dl_string_free(char *s);

/**
 * Parse a configuration from JSON text.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum DlStatus dl_config_from_json(const char *json, struct DlConfig **out);

/**
 * Parse a configuration file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DlStatus dl_config_from_path(const char *path, struct DlConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from `dl_config_from_*` not yet freed.
 */
void dl_config_free(struct DlConfig *cfg);

/**
 * Override the tolerance; a non-positive value restores the config's own.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DlStatus dl_config_set_tol(struct DlConfig *cfg, double tol);

/**
 * Override the interval cap; zero restores the default.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum DlStatus dl_config_set_max_intervals(struct DlConfig *cfg, size_t max_intervals);

/**
 * Interval length xi as a fraction and the interval count for t_final.
 *
 * # Safety
 * `cfg` must be a live handle; the out pointers must be writable.
 */
enum DlStatus dl_config_plan(const struct DlConfig *cfg,
                             int64_t *xi_num,
                             int64_t *xi_den,
                             size_t *n);

/**
 * Expectation value of one observable on explicit times.
 * `observable` takes the config's operator names, e.g. "n:A".
 *
 * # Safety
 * `cfg` must be a live handle; `times` and `values` must point to `len`
 * doubles each.
 */
enum DlStatus dl_evolve_observable(const struct DlConfig *cfg,
                                   const char *observable,
                                   const double *times,
                                   size_t len,
                                   double *values);

/**
 * Run a command in memory. `command_code` is a `DlCommand` value.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum DlStatus dl_execute(const struct DlConfig *cfg, int32_t command_code, struct DlResult **out);

/**
 * Run a command and write CSV files plus the JSON sidecar into `out_dir`,
 * exactly as the command-line tool does. `command_code` is a `DlCommand` value;
 * non-positive `tol` and zero `max_intervals` keep the config's settings.
 *
 * # Safety
 * `config_path` and `out_dir` must be nul-terminated strings.
 */
enum DlStatus dl_run_to_dir(const char *config_path,
                            int32_t command_code,
                            const char *out_dir,
                            double tol,
                            size_t max_intervals);

/**
 * # Safety
 * `res` must be null or a handle from `dl_execute` not yet freed.
 */
void dl_result_free(struct DlResult *res);

/**
 * Number of tables in a result; zero for a null handle.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
size_t dl_result_table_count(const struct DlResult *res);

/**
 * Largest trace error reported by the run.
 *
 * # Safety
 * `res` must be null or a live handle.
 */
double dl_result_max_trace_error(const struct DlResult *res);

/**
 * File stem of table `index` (e.g. "evolve"); free with `dl_string_free`.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum DlStatus dl_result_table_name(const struct DlResult *res, size_t index, char **out);

/**
 * CSV text of table `index`; free with `dl_string_free`.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum DlStatus dl_result_table_csv(const struct DlResult *res, size_t index, char **out);

/**
 * Diagnostics JSON of the run; free with `dl_string_free`.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum DlStatus dl_result_diagnostics(const struct DlResult *res, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELAYLINE_H */
