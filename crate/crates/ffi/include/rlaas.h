#ifndef RLAAS_H
#define RLAAS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RlaasStatus {
  RLAAS_OK = 0,
  RLAAS_NULL_POINTER = 1,
  RLAAS_INVALID_UTF8 = 2,
  RLAAS_INVALID_ARGUMENT = 3,
  RLAAS_ENV_ERROR = 4,
  RLAAS_CHECKPOINT_ERROR = 5,
  RLAAS_PROTOCOL_ERROR = 6,
  RLAAS_BUFFER_TOO_SMALL = 7,
  RLAAS_PANIC = 8,
} RlaasStatus;

/**
 * Opaque single-episode environment.
 */
typedef struct RlaasEnv RlaasEnv;

/**
 * Opaque token policy.
 */
typedef struct RlaasPolicy RlaasPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *rlaas_last_error(void);

/**
 * A zero-weight (uniform) policy over a context window of `window` tokens.
 */
enum RlaasStatus rlaas_policy_new(size_t window, struct RlaasPolicy **out);

/**
 * Loads a policy from a checkpoint store; `version < 0` means the latest.
 */
enum RlaasStatus rlaas_policy_load(const char *store, int64_t version, struct RlaasPolicy **out);

void rlaas_policy_free(struct RlaasPolicy *policy);

/**
 * Decodes one action after `prompt`. `sample == 0` decodes greedily;
 * otherwise `seed` drives sampling. The end-of-action token is stripped.
 */
enum RlaasStatus rlaas_policy_generate(const struct RlaasPolicy *policy,
                                       const char *prompt,
                                       size_t max_tokens,
                                       int32_t sample,
                                       uint64_t seed,
                                       char *out,
                                       size_t cap,
                                       size_t *needed);

/**
 * `kind` is "gomoku" or "arith".
 */
enum RlaasStatus rlaas_env_new(const char *kind, struct RlaasEnv **out);

void rlaas_env_free(struct RlaasEnv *env);

/**
 * Starts a new episode and writes the rendered state.
 */
enum RlaasStatus rlaas_env_reset(struct RlaasEnv *env,
                                 uint64_t seed,
                                 char *out,
                                 size_t cap,
                                 size_t *needed);

/**
 * Applies `action` to the current episode. Writes the new state, the step
 * score and whether the episode ended.
 */
enum RlaasStatus rlaas_env_step(struct RlaasEnv *env,
                                const char *action,
                                double *score,
                                int32_t *done,
                                char *out,
                                size_t cap,
                                size_t *needed);

/**
 * Validates one wire frame and writes its canonical encoding.
 */
enum RlaasStatus rlaas_protocol_canonicalize(const char *frame,
                                             char *out,
                                             size_t cap,
                                             size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RLAAS_H */
