#ifndef COSHAPE_H
#define COSHAPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsStatus {
  CsStatus_Ok = 0,
  CsStatus_NullPointer = 1,
  CsStatus_InvalidUtf8 = 2,
  /**
   * Bad input: malformed JSON, out-of-range index, undersized buffer.
   */
  CsStatus_Config = 3,
  /**
   * Singular or ill-conditioned numerics.
   */
  CsStatus_Numerical = 4,
  CsStatus_Panic = 5,
} CsStatus;

/**
 * Opaque scenario handle.
 */
typedef struct CsScenario CsScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a scenario document and stores a new handle in `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsStatus cs_scenario_from_json(const char *json, struct CsScenario **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `s` must come from [`cs_scenario_from_json`] and not be used afterwards.
 */
void cs_scenario_free(struct CsScenario *s);

/**
 * Channel dimension `n = K·L·M·N`, or 0 for a null handle.
 *
 * # Safety
 * `s` must be null or a live handle.
 */
uintptr_t cs_scenario_dim(const struct CsScenario *s);

/**
 * Number of directed cooperation links, in the order used by
 * [`cs_allocate_exhaustive`].
 *
 * # Safety
 * `s` must be null or a live handle.
 */
uintptr_t cs_num_links(const struct CsScenario *s);

/**
 * Closed-form MSE at TX `tx` with `B = I` on every incoming link at `rate` bits.
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CsStatus cs_unshaped_mse(const struct CsScenario *s, uintptr_t tx, uint32_t rate, double *out);

/**
 * MSE at TX `tx` with optimized shaping on every incoming link at `rate` bits.
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CsStatus cs_shaped_mse(const struct CsScenario *s, uintptr_t tx, uint32_t rate, double *out);

/**
 * Centralized MSE at TX `tx` from its own and its cooperators' unquantized estimates.
 *
 * # Safety
 * `s` must be a live handle and `out` a valid pointer.
 */
enum CsStatus cs_wyner_ziv_bound(const struct CsScenario *s, uintptr_t tx, double *out);

/**
 * Best split of `budget` bits over all links. Writes [`cs_num_links`] rates
 * into `link_rates` (capacity `len`) and the average MSE into `avg_mse`.
 *
 * # Safety
 * `s` must be a live handle, `link_rates` valid for `len` writes and
 * `avg_mse` a valid pointer.
 */
enum CsStatus cs_allocate_exhaustive(const struct CsScenario *s,
                                     uint32_t budget,
                                     uint32_t *link_rates,
                                     uintptr_t len,
                                     double *avg_mse);

/**
 * Runs a Monte Carlo MSE sweep and stores the CSV table in `*csv_out`.
 * `sweep_json` is a sweep block (1-based TX ids) or null for defaults.
 *
 * # Safety
 * `s` must be a live handle, `sweep_json` null or NUL-terminated, and
 * `csv_out` a valid pointer. Free the result with [`cs_string_free`].
 */
enum CsStatus cs_run_mse_sweep(const struct CsScenario *s, const char *sweep_json, char **csv_out);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `p` must come from this library and not be used afterwards.
 */
void cs_string_free(char *p);

/**
 * Message for the last failed call on this thread, or null.
 */
const char *cs_last_error_message(void);

/**
 * Library version string.
 */
const char *cs_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSHAPE_H */
