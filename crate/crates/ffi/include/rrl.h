#ifndef RRL_H
#define RRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RrlStatus {
  RRL_STATUS_OK = 0,
  RRL_STATUS_NULL_POINTER = 1,
  RRL_STATUS_INVALID_ARGUMENT = 2,
  RRL_STATUS_CONFIG = 3,
  RRL_STATUS_IO = 4,
  RRL_STATUS_NOT_FOUND = 5,
  RRL_STATUS_BUFFER_TOO_SMALL = 6,
  RRL_STATUS_RUNTIME = 7,
  RRL_STATUS_PANIC = 8,
} RrlStatus;

typedef enum RrlOrigin {
  RRL_ORIGIN_POLICY_GENERATED = 0,
  RRL_ORIGIN_CANONICAL = 1,
} RrlOrigin;

/**
 * Opaque replay buffer bound to a problem set's ids.
 */
typedef struct RrlBuffer RrlBuffer;

/**
 * Opaque run configuration.
 */
typedef struct RrlConfig RrlConfig;

/**
 * Opaque generated problem set.
 */
typedef struct RrlProblemSet RrlProblemSet;

/**
 * Final evaluation of a training run.
 */
typedef struct RrlRunSummary {
  uint64_t steps_completed;
  double solve_rate_overall;
  double initial_entropy;
  double final_entropy;
  double initial_ppl_variance;
  double final_ppl_variance;
  uint64_t replay_attempts;
  uint64_t replay_successes;
} RrlRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rrl_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full length including the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t rrl_last_error_message(char *buf, size_t cap);

/**
 * Replay probability for a step; `epoch` counts from 1.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum RrlStatus rrl_replay_probability(uint64_t epoch,
                                      uint64_t step_in_epoch,
                                      uint64_t steps_per_epoch,
                                      double beta,
                                      double *out);

/**
 * Critic-stability gate over a loss history of `len` values.
 *
 * # Safety
 * `history` must point to `len` doubles (or be null with `len == 0`); `out`
 * must be valid.
 */
enum RrlStatus rrl_replay_gate(const double *history,
                               size_t len,
                               size_t window,
                               double rel_tol,
                               size_t max_warmup_steps,
                               bool *out);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer; it receives a handle owned by the caller.
 */
enum RrlStatus rrl_config_new(struct RrlConfig **out);

/**
 * Configuration parsed from TOML text.
 *
 * # Safety
 * `toml_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RrlStatus rrl_config_from_toml(const char *toml_text, struct RrlConfig **out);

/**
 * Sets a dotted config key, e.g. `ppo.clip_eps` to `0.1`. The value is a TOML
 * literal or a bare string. The config is revalidated; on failure it is left
 * unchanged.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum RrlStatus rrl_config_set(struct RrlConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must be null or a handle from this library, not used afterwards.
 */
void rrl_config_free(struct RrlConfig *config);

/**
 * Trains one run to completion, writing artifacts to the config's
 * `output_dir`.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum RrlStatus rrl_train(const struct RrlConfig *config, struct RrlRunSummary *out);

/**
 * Generates `count` problems. `env_kind` is `arith_target`, `grammar_fill`
 * or `grid_path`; `tier` is `easy`, `medium` or `hard`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be valid.
 */
enum RrlStatus rrl_problems_generate(const char *env_kind,
                                     const char *tier,
                                     size_t count,
                                     uint64_t seed,
                                     struct RrlProblemSet **out);

/**
 * # Safety
 * `set` must be a live handle and `out` valid.
 */
enum RrlStatus rrl_problems_len(const struct RrlProblemSet *set, size_t *out);

/**
 * Space-separated canonical solution of problem `index`. `needed` (optional)
 * receives the required size including the terminator.
 *
 * # Safety
 * `set` must be live; `buf` null or `cap` writable bytes; `needed` null or valid.
 */
enum RrlStatus rrl_problem_canonical(const struct RrlProblemSet *set,
                                     size_t index,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

/**
 * Checks a space-separated solution against problem `index`.
 *
 * # Safety
 * `set` must be live, `solution` NUL-terminated and `solved` valid.
 */
enum RrlStatus rrl_problem_check(const struct RrlProblemSet *set,
                                 size_t index,
                                 const char *solution,
                                 bool *solved);

/**
 * # Safety
 * `set` must be null or a handle from this library, not used afterwards.
 */
void rrl_problems_free(struct RrlProblemSet *set);

/**
 * Empty replay buffer over the problems of `set`.
 *
 * # Safety
 * `set` must be live and `out` valid.
 */
enum RrlStatus rrl_buffer_new(const struct RrlProblemSet *set, struct RrlBuffer **out);

/**
 * Inserts a state. `inserted` is false for duplicates; `evicted` (optional)
 * reports whether a full list dropped its highest-counter entry.
 *
 * # Safety
 * `buffer` must be live; `tokens` must point to `len` ids; out pointers valid
 * or null where documented.
 */
enum RrlStatus rrl_buffer_insert(struct RrlBuffer *buffer,
                                 size_t problem,
                                 const uint32_t *tokens,
                                 size_t len,
                                 enum RrlOrigin origin,
                                 double value,
                                 uint64_t step,
                                 bool *inserted,
                                 bool *evicted);

/**
 * Number of buffered states for problem `problem`.
 *
 * # Safety
 * `buffer` must be live and `out` valid.
 */
enum RrlStatus rrl_buffer_len(const struct RrlBuffer *buffer, size_t problem, size_t *out);

/**
 * Draws a state for `problem` with weight 1/(1+counter) using a generator
 * seeded by `seed`. Writes up to `cap` ids to `tokens`, the state length to
 * `len` and its origin to `origin`. Returns `NotFound` on an empty list.
 *
 * # Safety
 * `buffer` must be live; `tokens` must have room for `cap` ids; `len` and
 * `origin` valid.
 */
enum RrlStatus rrl_buffer_select(const struct RrlBuffer *buffer,
                                 size_t problem,
                                 uint64_t seed,
                                 uint32_t *tokens,
                                 size_t cap,
                                 size_t *len,
                                 enum RrlOrigin *origin);

/**
 * Records a replay outcome: the counter increments, and a solved replay
 * removes the state.
 *
 * # Safety
 * `buffer` must be live and `tokens` point to `len` ids.
 */
enum RrlStatus rrl_buffer_record(struct RrlBuffer *buffer,
                                 size_t problem,
                                 const uint32_t *tokens,
                                 size_t len,
                                 enum RrlOrigin origin,
                                 bool solved);

/**
 * # Safety
 * `buffer` must be null or a handle from this library, not used afterwards.
 */
void rrl_buffer_free(struct RrlBuffer *buffer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RRL_H */
