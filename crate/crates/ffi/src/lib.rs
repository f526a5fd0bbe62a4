//! C ABI over the toolkit: environments, trained agents, parameter counting
//! and training runs.
//!
//! Every function returns a [`VrmsacStatus`]. On failure a message is kept per
//! thread and can be read with [`vrmsac_last_error_message`]. Handles are
//! opaque, created by `*_new`/`*_load` and released by the matching `*_free`.
//! Panics never cross the boundary; they are reported as
//! [`VrmsacStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vrmsac::envs::{make_env, Env, EnvName, PoVariant};
use vrmsac::trainer::run::augment;
use vrmsac::trainer::{load_agent, run_training, Agent, AgentState, Learner, Streams, TrainConfig};
use vrmsac::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VrmsacStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad UTF-8, wrong buffer length or similar caller mistakes.
    InvalidArgument = 2,
    Config = 3,
    Usage = 4,
    Training = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque environment handle.
pub struct VrmsacEnv {
    env: Env,
}

/// Opaque handle to a trained agent plus its per-episode acting state.
pub struct VrmsacAgent {
    agent: Agent,
    state: AgentState,
    rngs: Streams,
    obs_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(VrmsacStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => VrmsacStatus::Config,
            Error::Usage(_) => VrmsacStatus::Usage,
            Error::Training { .. } => VrmsacStatus::Training,
            Error::Checkpoint(_) => VrmsacStatus::Checkpoint,
            Error::Io(_) => VrmsacStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VrmsacStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VrmsacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VrmsacStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VrmsacStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(VrmsacStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, want: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    if len != want {
        return Err(invalid(format!("`{name}` has length {len}, expected {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Byte length of the last error message on this thread, excluding the NUL.
#[no_mangle]
pub extern "C" fn vrmsac_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copy the last error message, NUL-terminated and truncated to fit `len`
/// bytes. Returns the number of bytes written without the NUL, or -1 if
/// `buf` is null or `len` is 0.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_last_error_message(buf: *mut c_char, len: usize) -> isize {
    if buf.is_null() || len == 0 {
        return -1;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
        n as isize
    })
}

/// Create an environment, e.g. `("pendulum", "novel", 7)`.
///
/// # Safety
/// `name` and `variant` must be NUL-terminated strings; `out` must be valid
/// for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_env_new(
    name: *const c_char,
    variant: *const c_char,
    seed: u64,
    out: *mut *mut VrmsacEnv,
) -> VrmsacStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let name: EnvName = str_arg(name, "name")?.parse()?;
        let variant: PoVariant = str_arg(variant, "variant")?.parse()?;
        let env = make_env(name, variant, seed)?;
        *out = Box::into_raw(Box::new(VrmsacEnv { env }));
        Ok(())
    })
}

/// Release an environment; null is ignored.
///
/// # Safety
/// `env` must come from [`vrmsac_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_env_free(env: *mut VrmsacEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation and action widths of an environment.
///
/// # Safety
/// `env` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_env_dims(
    env: *mut VrmsacEnv,
    obs_dim: *mut usize,
    action_dim: *mut usize,
) -> VrmsacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let spec = env.env.spec();
        *out_ptr(obs_dim, "obs_dim")? = spec.obs_dim;
        *out_ptr(action_dim, "action_dim")? = spec.action_dim;
        Ok(())
    })
}

/// Start an episode and write the first observation.
///
/// # Safety
/// `obs` must point to `obs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_env_reset(env: *mut VrmsacEnv, obs: *mut f64, obs_len: usize) -> VrmsacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let out = slice_out(obs, obs_len, env.env.spec().obs_dim, "obs")?;
        out.copy_from_slice(&env.env.reset());
        Ok(())
    })
}

/// Apply one action (clipped to bounds) and write the outcome.
///
/// # Safety
/// `action` must point to `action_len` doubles, `obs` to `obs_len` writable
/// doubles; `reward` and `done` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_env_step(
    env: *mut VrmsacEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> VrmsacStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let action = slice_in(action, action_len, "action")?;
        let obs = slice_out(obs, obs_len, env.env.spec().obs_dim, "obs")?;
        let reward = out_ptr(reward, "reward")?;
        let done = out_ptr(done, "done")?;
        let s = env.env.step(action)?;
        obs.copy_from_slice(&s.obs);
        *reward = s.reward;
        *done = s.done;
        Ok(())
    })
}

/// Load an agent from a training checkpoint or snapshot.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_load(path: *const c_char, out: *mut *mut VrmsacAgent) -> VrmsacStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (config, agent) = load_agent(Path::new(str_arg(path, "path")?))?;
        let obs_dim = agent.dims().x_dim - 1;
        let state = agent.initial_state();
        *out = Box::into_raw(Box::new(VrmsacAgent {
            agent,
            state,
            rngs: Streams::tagged(config.seed, "ffi/"),
            obs_dim,
        }));
        Ok(())
    })
}

/// Release an agent; null is ignored.
///
/// # Safety
/// `agent` must come from [`vrmsac_agent_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_free(agent: *mut VrmsacAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Observation and action widths the agent expects.
///
/// # Safety
/// `agent` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_dims(
    agent: *mut VrmsacAgent,
    obs_dim: *mut usize,
    action_dim: *mut usize,
) -> VrmsacStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        *out_ptr(obs_dim, "obs_dim")? = a.obs_dim;
        *out_ptr(action_dim, "action_dim")? = a.agent.dims().action_dim;
        Ok(())
    })
}

/// Trainable parameter count of the loaded agent.
///
/// # Safety
/// `agent` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_param_count(agent: *mut VrmsacAgent, out: *mut u64) -> VrmsacStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        *out_ptr(out, "out")? = a.agent.param_count() as u64;
        Ok(())
    })
}

/// Clear the recurrent state at an episode boundary and reseed the action noise.
///
/// # Safety
/// `agent` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_reset(agent: *mut VrmsacAgent, seed: u64) -> VrmsacStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        a.state = a.agent.initial_state();
        a.rngs = Streams::tagged(seed, "ffi/");
        Ok(())
    })
}

/// Feed one observation with the reward that led to it (0 at episode start)
/// and write the next action.
///
/// # Safety
/// `obs` must point to `obs_len` doubles and `action` to `action_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_agent_act(
    agent: *mut VrmsacAgent,
    obs: *const f64,
    obs_len: usize,
    prev_reward: f64,
    deterministic: bool,
    action: *mut f64,
    action_len: usize,
) -> VrmsacStatus {
    guard(|| {
        let a = handle(agent, "agent")?;
        let obs = slice_in(obs, obs_len, "obs")?;
        if obs_len != a.obs_dim {
            return Err(invalid(format!("`obs` has length {obs_len}, expected {}", a.obs_dim)));
        }
        let out = slice_out(action, action_len, a.agent.dims().action_dim, "action")?;
        let x = augment(obs, prev_reward);
        let u = a.agent.act(&mut a.state, &x, deterministic, &mut a.rngs)?;
        out.copy_from_slice(&u);
        Ok(())
    })
}

/// Parameter count of the agent described by a config text (`key = value` lines).
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_count_params(config: *const c_char, out: *mut u64) -> VrmsacStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = TrainConfig::from_text(str_arg(config, "config")?)?;
        *out = Agent::new(&cfg)?.param_count() as u64;
        Ok(())
    })
}

/// Run a full training job, writing metrics and checkpoints to `out_dir`.
///
/// # Safety
/// `config` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn vrmsac_train(config: *const c_char, out_dir: *const c_char) -> VrmsacStatus {
    guard(|| {
        let cfg = TrainConfig::from_text(str_arg(config, "config")?)?;
        run_training(&cfg, Path::new(str_arg(out_dir, "out_dir")?))?;
        Ok(())
    })
}
