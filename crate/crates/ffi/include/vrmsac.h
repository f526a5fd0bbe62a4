#ifndef VRMSAC_H
#define VRMSAC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every exported function.
typedef enum {
  VRMSAC_STATUS_OK = 0,
  VRMSAC_STATUS_NULL_POINTER = 1,
  // Bad UTF-8, wrong buffer length or similar caller mistakes.
  VRMSAC_STATUS_INVALID_ARGUMENT = 2,
  VRMSAC_STATUS_CONFIG = 3,
  VRMSAC_STATUS_USAGE = 4,
  VRMSAC_STATUS_TRAINING = 5,
  VRMSAC_STATUS_CHECKPOINT = 6,
  VRMSAC_STATUS_IO = 7,
  VRMSAC_STATUS_PANIC = 8,
} VrmsacStatus;

// Opaque handle to a trained agent plus its per-episode acting state.
typedef struct VrmsacAgent VrmsacAgent;

// Opaque environment handle.
typedef struct VrmsacEnv VrmsacEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Byte length of the last error message on this thread, excluding the NUL.
size_t vrmsac_last_error_length(void);

// Copy the last error message, NUL-terminated and truncated to fit `len`
// bytes. Returns the number of bytes written without the NUL, or -1 if
// `buf` is null or `len` is 0.
//
// # Safety
// `buf` must point to `len` writable bytes.
ptrdiff_t vrmsac_last_error_message(char *buf, size_t len);

// Create an environment, e.g. `("pendulum", "novel", 7)`.
//
// # Safety
// `name` and `variant` must be NUL-terminated strings; `out` must be valid
// for writing a pointer.
VrmsacStatus vrmsac_env_new(const char *name, const char *variant, uint64_t seed, VrmsacEnv **out);

// Release an environment; null is ignored.
//
// # Safety
// `env` must come from [`vrmsac_env_new`] and not be used afterwards.
void vrmsac_env_free(VrmsacEnv *env);

// Observation and action widths of an environment.
//
// # Safety
// `env` must be a live handle; the out pointers must be writable.
VrmsacStatus vrmsac_env_dims(VrmsacEnv *env, size_t *obs_dim, size_t *action_dim);

// Start an episode and write the first observation.
//
// # Safety
// `obs` must point to `obs_len` writable doubles.
VrmsacStatus vrmsac_env_reset(VrmsacEnv *env, double *obs, size_t obs_len);

// Apply one action (clipped to bounds) and write the outcome.
//
// # Safety
// `action` must point to `action_len` doubles, `obs` to `obs_len` writable
// doubles; `reward` and `done` must be writable.
VrmsacStatus vrmsac_env_step(VrmsacEnv *env,
                             const double *action,
                             size_t action_len,
                             double *obs,
                             size_t obs_len,
                             double *reward,
                             bool *done);

// Load an agent from a training checkpoint or snapshot.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
VrmsacStatus vrmsac_agent_load(const char *path, VrmsacAgent **out);

// Release an agent; null is ignored.
//
// # Safety
// `agent` must come from [`vrmsac_agent_load`] and not be used afterwards.
void vrmsac_agent_free(VrmsacAgent *agent);

// Observation and action widths the agent expects.
//
// # Safety
// `agent` must be a live handle; the out pointers must be writable.
VrmsacStatus vrmsac_agent_dims(VrmsacAgent *agent, size_t *obs_dim, size_t *action_dim);

// Trainable parameter count of the loaded agent.
//
// # Safety
// `agent` must be a live handle; `out` must be writable.
VrmsacStatus vrmsac_agent_param_count(VrmsacAgent *agent, uint64_t *out);

// Clear the recurrent state at an episode boundary and reseed the action noise.
//
// # Safety
// `agent` must be a live handle.
VrmsacStatus vrmsac_agent_reset(VrmsacAgent *agent, uint64_t seed);

// Feed one observation with the reward that led to it (0 at episode start)
// and write the next action.
//
// # Safety
// `obs` must point to `obs_len` doubles and `action` to `action_len`
// writable doubles.
VrmsacStatus vrmsac_agent_act(VrmsacAgent *agent,
                              const double *obs,
                              size_t obs_len,
                              double prev_reward,
                              bool deterministic,
                              double *action,
                              size_t action_len);

// Parameter count of the agent described by a config text (`key = value` lines).
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
VrmsacStatus vrmsac_count_params(const char *config, uint64_t *out);

// Run a full training job, writing metrics and checkpoints to `out_dir`.
//
// # Safety
// `config` and `out_dir` must be NUL-terminated strings.
VrmsacStatus vrmsac_train(const char *config, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VRMSAC_H */
