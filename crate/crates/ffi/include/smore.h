#ifndef SMORE_H
#define SMORE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmoreGamma {
  SMORE_GAMMA_SMORE = 0,
  SMORE_GAMMA_MOMOR_BOUND = 1,
  SMORE_GAMMA_STAR = 2,
  SMORE_GAMMA_SHARED = 3,
} SmoreGamma;

typedef enum SmoreStatus {
  SMORE_STATUS_OK = 0,
  SMORE_STATUS_NULL_POINTER = 1,
  SMORE_STATUS_INVALID_UTF8 = 2,
  SMORE_STATUS_INVALID_CONFIG = 3,
  SMORE_STATUS_DIMENSION_MISMATCH = 4,
  SMORE_STATUS_UNSUPPORTED = 5,
  SMORE_STATUS_INTERNAL = 6,
} SmoreStatus;

/**
 * Expert bank with its router.
 */
typedef struct SmoreBank SmoreBank;

/**
 * Validated architecture description.
 */
typedef struct SmoreSpec SmoreSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *smore_last_error(void);

/**
 * Parses and validates a JSON architecture spec.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum SmoreStatus smore_spec_from_json(const char *json, struct SmoreSpec **out);

/**
 * # Safety
 * `spec` must come from [`smore_spec_from_json`] and not be freed twice.
 */
void smore_spec_free(struct SmoreSpec *spec);

/**
 * Input width `d` and output width `d_out`.
 *
 * # Safety
 * `spec` must be a live handle; `d` and `d_out` must be writable.
 */
enum SmoreStatus smore_spec_widths(const struct SmoreSpec *spec, size_t *d, size_t *d_out);

/**
 * Adapter parameter count (experts, mixers and final projection).
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum SmoreStatus smore_spec_param_count(const struct SmoreSpec *spec, uint64_t *out);

/**
 * Exact flexibility count as a decimal string; free it with
 * [`smore_string_free`].
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum SmoreStatus smore_spec_gamma(const struct SmoreSpec *spec, enum SmoreGamma which, char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void smore_string_free(char *s);

/**
 * Seeded bank; up-projections start at zero so the adapter output is zero.
 *
 * # Safety
 * `spec` must be a live handle; `out` must be writable.
 */
enum SmoreStatus smore_bank_init(const struct SmoreSpec *spec,
                                 uint64_t seed,
                                 struct SmoreBank **out);

/**
 * Replaces every parameter (router included) with U[-scale, scale] draws.
 *
 * # Safety
 * `bank` must be a live handle.
 */
enum SmoreStatus smore_bank_randomize(struct SmoreBank *bank, uint64_t seed, double scale);

/**
 * # Safety
 * `bank` must come from [`smore_bank_init`] and not be freed twice.
 */
void smore_bank_free(struct SmoreBank *bank);

/**
 * Number of scalars in the bank, router included.
 *
 * # Safety
 * `bank` must be a live handle; `out` must be writable.
 */
enum SmoreStatus smore_bank_param_len(const struct SmoreBank *bank, size_t *out);

/**
 * Routes and propagates one token in eval mode, writing the adapter output.
 *
 * # Safety
 * `x` must hold `x_len` doubles and `out` must hold `out_len` doubles.
 */
enum SmoreStatus smore_bank_forward(const struct SmoreBank *bank,
                                    const double *x,
                                    size_t x_len,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMORE_H */
