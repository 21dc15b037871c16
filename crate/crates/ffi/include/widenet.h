#ifndef WIDENET_H
#define WIDENET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum WnBlockKind {
  WN_BLOCK_KIND_MLP = 0,
  WN_BLOCK_KIND_RESNET = 1,
  WN_BLOCK_KIND_DENSENET = 2,
  WN_BLOCK_KIND_D2RL = 3,
} WnBlockKind;

typedef enum WnStatus {
  WN_STATUS_OK = 0,
  WN_STATUS_NULL_POINTER = 1,
  WN_STATUS_INVALID_ARGUMENT = 2,
  WN_STATUS_SHAPE = 3,
  WN_STATUS_CONFIG = 4,
  WN_STATUS_IO = 5,
  WN_STATUS_STATE = 6,
  WN_STATUS_NON_FINITE = 7,
  WN_STATUS_REPLAY = 8,
  WN_STATUS_CHECKPOINT = 9,
  WN_STATUS_PANIC = 10,
} WnStatus;

/**
 * Environment handle.
 */
typedef struct WnEnv WnEnv;

/**
 * Deterministic policy loaded from a checkpoint.
 */
typedef struct WnPolicy WnPolicy;

/**
 * Replay buffer handle.
 */
typedef struct WnReplay WnReplay;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *wn_last_error(void);

/**
 * Stored parameter count of a block, plus a linear head when
 * `head_output_dim` is nonzero.
 */
enum WnStatus wn_count_parameters(enum WnBlockKind kind,
                                  size_t input_dim,
                                  size_t num_layers,
                                  size_t units,
                                  bool batch_norm,
                                  size_t head_output_dim,
                                  uint64_t *out_total);

/**
 * Width of a block's output.
 */
enum WnStatus wn_output_dim(enum WnBlockKind kind,
                            size_t input_dim,
                            size_t num_layers,
                            size_t units,
                            uint64_t *out_dim);

/**
 * Effective rank of a row-major `rows × cols` feature matrix.
 */
enum WnStatus wn_effective_rank(const double *data,
                                size_t rows,
                                size_t cols,
                                double delta,
                                uint64_t *out_rank);

/**
 * New replay buffer. `uniform` disables prioritization; `seed` drives sampling.
 */
enum WnStatus wn_replay_new(size_t capacity,
                            size_t state_dim,
                            size_t action_dim,
                            double alpha,
                            double priority_eps,
                            bool uniform,
                            uint64_t seed,
                            struct WnReplay **out);

void wn_replay_free(struct WnReplay *h);

enum WnStatus wn_replay_len(const struct WnReplay *h, uint64_t *out_len);

/**
 * Stores one transition at the current maximum priority; `out_slot` (may be
 * null) receives its slot.
 */
enum WnStatus wn_replay_add(struct WnReplay *h,
                            const double *s,
                            const double *a,
                            double r,
                            const double *s_next,
                            bool done,
                            uint64_t *out_slot);

/**
 * Draws `batch` slots. Each output array holds `batch` entries; the
 * generation values must be passed back to [`wn_replay_update_priorities`].
 */
enum WnStatus wn_replay_sample(struct WnReplay *h,
                               size_t batch,
                               double beta,
                               uint64_t *out_slots,
                               uint64_t *out_generations,
                               double *out_weights);

/**
 * `p ← |td| + ε` for slots still holding the sampled transition.
 */
enum WnStatus wn_replay_update_priorities(struct WnReplay *h,
                                          const uint64_t *slots,
                                          const uint64_t *generations,
                                          const double *td_errors,
                                          size_t n);

/**
 * Environment by name: "pendulum", "pointmass" or "linsys".
 */
enum WnStatus wn_env_new(const char *name, struct WnEnv **out);

void wn_env_free(struct WnEnv *h);

enum WnStatus wn_env_dims(const struct WnEnv *h, uint64_t *out_state_dim, uint64_t *out_action_dim);

/**
 * Starts an episode; `out_state` receives `state_dim` values.
 */
enum WnStatus wn_env_reset(struct WnEnv *h, uint64_t seed, double *out_state);

/**
 * One step. `out_done` is set on termination or truncation.
 */
enum WnStatus wn_env_step(struct WnEnv *h,
                          const double *action,
                          double *out_state,
                          double *out_reward,
                          bool *out_done);

/**
 * Deterministic policy from a checkpoint written by a training run.
 */
enum WnStatus wn_policy_load(const char *path, struct WnPolicy **out);

void wn_policy_free(struct WnPolicy *h);

enum WnStatus wn_policy_dims(const struct WnPolicy *h,
                             uint64_t *out_state_dim,
                             uint64_t *out_action_dim);

/**
 * Deterministic actions for `rows` states (`rows × state_dim` in,
 * `rows × action_dim` out), in environment units.
 */
enum WnStatus wn_policy_act(const struct WnPolicy *h,
                            const double *states,
                            size_t rows,
                            double *out_actions);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WIDENET_H */
