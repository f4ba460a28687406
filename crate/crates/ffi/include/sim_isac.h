/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SIM_ISAC_H
#define SIM_ISAC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SimIsacStatus {
  SIM_ISAC_STATUS_OK = 0,
  SIM_ISAC_STATUS_NULL_POINTER = 1,
  SIM_ISAC_STATUS_INVALID_ARGUMENT = 2,
  SIM_ISAC_STATUS_CONFIG = 3,
  SIM_ISAC_STATUS_DEPENDENCY = 4,
  SIM_ISAC_STATUS_INFEASIBLE_QOS = 5,
  SIM_ISAC_STATUS_NUMERICAL = 6,
  SIM_ISAC_STATUS_IO = 7,
  SIM_ISAC_STATUS_BUFFER_TOO_SMALL = 8,
  SIM_ISAC_STATUS_PANIC = 9,
} SimIsacStatus;

/**
 * Scenario configuration.
 */
typedef struct SimIsacScenario SimIsacScenario;

/**
 * Optimized beams and the data needed to evaluate them.
 */
typedef struct SimIsacSolution SimIsacSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *sim_isac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sim_isac_version(void);

/**
 * Creates the built-in desk scenario.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SimIsacStatus sim_isac_scenario_default(struct SimIsacScenario **out);

/**
 * Parses and validates a TOML scenario.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SimIsacStatus sim_isac_scenario_from_toml(const char *toml, struct SimIsacScenario **out);

/**
 * # Safety
 * `scenario` must come from a `sim_isac_scenario_*` constructor or be null.
 */
void sim_isac_scenario_free(struct SimIsacScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle.
 */
enum SimIsacStatus sim_isac_scenario_set_seed(struct SimIsacScenario *scenario, uint64_t seed);

/**
 * Writes the hex scenario hash (64 chars plus NUL) into `buf`.
 *
 * # Safety
 * `scenario` must be a live handle and `buf` writable for `len` bytes.
 */
enum SimIsacStatus sim_isac_scenario_hash(const struct SimIsacScenario *scenario,
                                          char *buf,
                                          size_t len);

/**
 * Runs pipeline stages ("all" or a comma-separated list) into `out_dir`.
 *
 * # Safety
 * `scenario` must be a live handle; `stages` and `out_dir` NUL-terminated strings.
 */
enum SimIsacStatus sim_isac_run(const struct SimIsacScenario *scenario,
                                const char *stages,
                                const char *out_dir);

/**
 * Synthesizes channels and runs the beam optimizer.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum SimIsacStatus sim_isac_solve(const struct SimIsacScenario *scenario,
                                  struct SimIsacSolution **out);

/**
 * # Safety
 * `solution` must come from [`sim_isac_solve`] or be null.
 */
void sim_isac_solution_free(struct SimIsacSolution *solution);

/**
 * Number of subcarriers and SIM elements per layer.
 *
 * # Safety
 * `solution` must be a live handle; the outputs valid pointers.
 */
enum SimIsacStatus sim_isac_solution_shape(const struct SimIsacSolution *solution,
                                           size_t *subcarriers,
                                           size_t *elements);

/**
 * BCRB of the optimized beams.
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
enum SimIsacStatus sim_isac_solution_bcrb(const struct SimIsacSolution *solution, double *out);

/**
 * Average PU spectral efficiency relative to its interference-free value.
 *
 * # Safety
 * `solution` must be a live handle and `out` a valid pointer.
 */
enum SimIsacStatus sim_isac_solution_qos_ratio(const struct SimIsacSolution *solution, double *out);

/**
 * Copies the beam of subcarrier `i` as interleaved (re, im) pairs; `len`
 * counts doubles and must be at least twice the element count.
 *
 * # Safety
 * `solution` must be a live handle and `out` writable for `len` doubles.
 */
enum SimIsacStatus sim_isac_solution_beam(const struct SimIsacSolution *solution,
                                          size_t i,
                                          double *out,
                                          size_t len);

/**
 * tr of the upper-left 3x3 block of J⁻¹ for a row-major 5x5 SPD matrix.
 *
 * # Safety
 * `fim` must point to 25 doubles and `out` be a valid pointer.
 */
enum SimIsacStatus sim_isac_bcrb_from_fim(const double *fim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIM_ISAC_H */
