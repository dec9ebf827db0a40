/* C ABI for the c3 contextual counterfactual credit-assignment library. */

#ifndef C3_FFI_H
#define C3_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
enum C3Status
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  C3_STATUS_OK = 0,
  C3_STATUS_NULL_POINTER = -1,
  C3_STATUS_INVALID_ARGUMENT = -2,
  C3_STATUS_UTF8 = -3,
  C3_STATUS_IO = -4,
  C3_STATUS_RUN_FAILED = -5,
};
#ifndef __cplusplus
typedef int32_t C3Status;
#endif // __cplusplus

/**
 * Opaque tabular softmax policy handle.
 */
typedef struct C3Policy C3Policy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buffer` (NUL
 * terminated, truncated to `capacity`). Returns the full message length in
 * bytes, or 0 when there is none.
 *
 * # Safety
 * `buffer` must point to at least `capacity` writable bytes, or be null
 * (then only the length is returned).
 */
uintptr_t c3_last_error_message(char *buffer, uintptr_t capacity);

/**
 * Computes the deterministic context key of a UTF-8 context string:
 * the 63-bit primary key plus the auxiliary fingerprints.
 *
 * # Safety
 * `text` must point to `text_len` readable bytes; the three output pointers
 * must be writable or null (null outputs are skipped).
 */
C3Status c3_context_key(const uint8_t *text,
                        uintptr_t text_len,
                        uint64_t *out_kappa,
                        uint64_t *out_char_length,
                        uint64_t *out_secondary_digest);

/**
 * Unbiased pass@k estimate for `c` successes out of `n` samples.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
C3Status c3_pass_at_k(uint64_t n, uint64_t c, uint64_t k, double *out);

/**
 * Leave-one-out contextual credit: `out_advantages[j] = mean_j - b_{-j}`
 * over one bucket's per-candidate replay means and counts.
 *
 * # Safety
 * `means`, `counts`, and `out_advantages` must each point to `len` readable
 * (respectively writable) elements.
 */
C3Status c3_credit_loo(const double *means,
                       const uint64_t *counts,
                       uintptr_t len,
                       double *out_advantages);

/**
 * Coupled full-sample credit (the no-LOO ablation baseline).
 *
 * # Safety
 * Same contracts as [`c3_credit_loo`].
 */
C3Status c3_credit_full_sample(const double *means,
                               const uint64_t *counts,
                               uintptr_t len,
                               double *out_advantages);

/**
 * Creates a policy over `role_count` roles with the given per-role macro-
 * action vocabulary sizes. Returns null on invalid input.
 *
 * # Safety
 * `role_vocabs` must point to `role_count` readable elements.
 */
struct C3Policy *c3_policy_new(const uint64_t *role_vocabs, uintptr_t role_count);

/**
 * Releases a policy handle. Null is ignored.
 *
 * # Safety
 * `policy` must be a pointer returned by this library and not yet freed.
 */
void c3_policy_free(struct C3Policy *policy);

/**
 * Exact log-probability of `token` for `role` at the context string.
 * Unseen contexts are uniform.
 *
 * # Safety
 * `policy` must be a live handle; `context` must point to `context_len`
 * readable bytes; `out` must be writable.
 */
C3Status c3_policy_log_prob(struct C3Policy *policy,
                            uintptr_t role,
                            const uint8_t *context,
                            uintptr_t context_len,
                            uint32_t token,
                            double *out);

/**
 * Samples one token for `role` at the context string from the named
 * deterministic stream `(seed, stream_index)`.
 *
 * # Safety
 * Same contracts as [`c3_policy_log_prob`].
 */
C3Status c3_policy_sample(struct C3Policy *policy,
                          uintptr_t role,
                          const uint8_t *context,
                          uintptr_t context_len,
                          uint64_t seed,
                          uint64_t stream_index,
                          uint32_t *out_token);

/**
 * Writes the policy to the line-oriented checkpoint format.
 *
 * # Safety
 * `policy` must be a live handle; `path` must be a NUL-terminated string.
 */
C3Status c3_policy_save(struct C3Policy *policy, const char *path);

/**
 * Loads a checkpoint written by [`c3_policy_save`] into a fresh handle with
 * the given role vocabularies. Returns null on failure.
 *
 * # Safety
 * `role_vocabs` must point to `role_count` readable elements; `path` must be
 * a NUL-terminated string.
 */
struct C3Policy *c3_policy_load(const uint64_t *role_vocabs,
                                uintptr_t role_count,
                                const char *path);

/**
 * Runs a full experiment from a TOML config file, writing result files under
 * `out_dir`. `method` optionally overrides the config's method by name.
 *
 * # Safety
 * `config_path` and `out_dir` must be NUL-terminated strings; `method` must
 * be a NUL-terminated string or null.
 */
C3Status c3_run_experiment(const char *config_path,
                           const char *out_dir,
                           const char *method,
                           uintptr_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* C3_FFI_H */
