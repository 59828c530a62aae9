#ifndef CPPO_H
#define CPPO_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CppoStatus {
  CPPO_STATUS_OK = 0,
  CPPO_STATUS_NULL_POINTER = 1,
  CPPO_STATUS_INVALID_INPUT = 2,
  CPPO_STATUS_NUMERICAL = 3,
  CPPO_STATUS_IO = 4,
  CPPO_STATUS_FORMAT = 5,
  CPPO_STATUS_BUFFER_TOO_SMALL = 6,
  CPPO_STATUS_PANIC = 7,
} CppoStatus;

/**
 * A policy architecture plus its weights.
 */
typedef struct CppoPolicy CppoPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *cppo_last_error(void);

/**
 * Creates a policy with the format prior as its weights.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum CppoStatus cppo_policy_prior(uint32_t width,
                                  uint32_t height,
                                  uint8_t alphabet,
                                  uint32_t max_len,
                                  struct CppoPolicy **out);

/**
 * Loads checkpoint weights for a policy of the given geometry.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CppoStatus cppo_policy_load(const char *path,
                                 uint32_t width,
                                 uint32_t height,
                                 uint8_t alphabet,
                                 uint32_t max_len,
                                 struct CppoPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from `cppo_policy_*` not yet freed.
 */
void cppo_policy_free(struct CppoPolicy *policy);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t cppo_policy_vocab_size(const struct CppoPolicy *policy);

/**
 * Next-token distribution. `query_kind` is 0 = cell lookup (`arg` = column),
 * 1 = row sum, 2 = count equal (`arg` = target value). `cells` and `noise`
 * are row-major with `width·height` entries.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
enum CppoStatus cppo_policy_next_token(const struct CppoPolicy *policy,
                                       uint32_t query_kind,
                                       uint32_t row,
                                       uint32_t arg,
                                       const uint8_t *cells,
                                       const uint8_t *noise,
                                       size_t n_cells,
                                       const uint32_t *prefix,
                                       size_t prefix_len,
                                       double *out_probs,
                                       size_t out_len);

/**
 * Group-relative advantages of `n ≥ 2` rewards into `out[n]`.
 *
 * # Safety
 * `rewards` and `out` must reference `n` values.
 */
enum CppoStatus cppo_relative_advantages(const double *rewards, size_t n, double *out);

/**
 * Two-way InfoNCE loss.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CppoStatus cppo_infonce(double sim_pos, double sim_neg, double tau, double *out);

/**
 * Shannon entropy in nats.
 *
 * # Safety
 * `probs` must reference `n` values; `out` must be valid.
 */
enum CppoStatus cppo_entropy(const double *probs, size_t n, double *out);

/**
 * Top-k selection over entropy shifts; writes a 0/1 mask and the count.
 *
 * # Safety
 * `delta_h` and `out_mask` must reference `n` values; `out_count` must be valid.
 */
enum CppoStatus cppo_select_topk(const double *delta_h,
                                 size_t n,
                                 double k_ratio,
                                 uint8_t *out_mask,
                                 size_t *out_count);

/**
 * Analyzes a trace file; `*out_json` receives a report to release with
 * [`cppo_string_free`].
 *
 * # Safety
 * `path` must be NUL-terminated; `out_json` must be valid.
 */
enum CppoStatus cppo_analyze_trace(const char *path,
                                   double k_ratio,
                                   double tau,
                                   uint64_t seed,
                                   char **out_json);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void cppo_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPPO_H */
