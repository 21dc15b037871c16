//! C ABI over the widenet library.
//!
//! Every function returns a [`WnStatus`]; on failure the message is available
//! through [`wn_last_error`] on the same thread. Objects are opaque handles
//! created by `*_new`/`*_load` and released with the matching `*_free`.
//! Arrays are row-major `double` buffers whose sizes the caller supplies.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use widenet::arch::{count_parameters, output_dim, BlockKind, ConnectivitySpec};
use widenet::diagnostics::effective_rank;
use widenet::distributed::{stream_rng, Learner, StreamRng};
use widenet::envs::{make_env, Environment};
use widenet::nn::{Activation, Checkpoint, Tensor};
use widenet::replay::{PrioritizedBuffer, ReplayMode, SampleIndex, Transition};
use widenet::agents::Policy;
use widenet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    State = 6,
    NonFinite = 7,
    Replay = 8,
    Checkpoint = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WnBlockKind {
    Mlp = 0,
    Resnet = 1,
    Densenet = 2,
    D2rl = 3,
}

/// Replay buffer handle.
pub struct WnReplay {
    buffer: PrioritizedBuffer,
    rng: StreamRng,
    state_dim: usize,
    action_dim: usize,
}

/// Environment handle.
pub struct WnEnv {
    env: Box<dyn Environment>,
}

/// Deterministic policy loaded from a checkpoint.
pub struct WnPolicy {
    policy: Policy,
    state_dim: usize,
    action_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WnStatus {
    match e {
        Error::Shape(_) | Error::DegenerateBatch(_) => WnStatus::Shape,
        Error::State(_) | Error::Worker(_) => WnStatus::State,
        Error::NonFinite(_) => WnStatus::NonFinite,
        Error::Config(_) | Error::Json(_) => WnStatus::Config,
        Error::Replay(_) => WnStatus::Replay,
        Error::Checkpoint(_) => WnStatus::Checkpoint,
        Error::Io(_) | Error::Csv(_) => WnStatus::Io,
    }
}

struct Fail(WnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(WnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WnStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside widenet".into());
            WnStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(WnStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn input<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_one<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    nonnull(p, what)?;
    *p = v;
    Ok(())
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    nonnull(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn block_spec(kind: WnBlockKind, input_dim: usize, num_layers: usize, units: usize, batch_norm: bool) -> Result<ConnectivitySpec, Fail> {
    let kind = match kind {
        WnBlockKind::Mlp => BlockKind::Mlp,
        WnBlockKind::Resnet => BlockKind::Resnet,
        WnBlockKind::Densenet => BlockKind::Densenet,
        WnBlockKind::D2rl => BlockKind::D2rl,
    };
    let spec = ConnectivitySpec {
        kind,
        num_layers,
        units,
        activation: Activation::Relu,
        batch_norm,
        input_dim,
    };
    spec.validate()?;
    Ok(spec)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Stored parameter count of a block, plus a linear head when
/// `head_output_dim` is nonzero.
#[no_mangle]
pub unsafe extern "C" fn wn_count_parameters(
    kind: WnBlockKind,
    input_dim: usize,
    num_layers: usize,
    units: usize,
    batch_norm: bool,
    head_output_dim: usize,
    out_total: *mut u64,
) -> WnStatus {
    guard(|| {
        let spec = block_spec(kind, input_dim, num_layers, units, batch_norm)?;
        let head = (head_output_dim > 0).then_some(head_output_dim);
        out_one(out_total, count_parameters(&spec, head).total as u64, "out_total")
    })
}

/// Width of a block's output.
#[no_mangle]
pub unsafe extern "C" fn wn_output_dim(
    kind: WnBlockKind,
    input_dim: usize,
    num_layers: usize,
    units: usize,
    out_dim: *mut u64,
) -> WnStatus {
    guard(|| {
        let spec = block_spec(kind, input_dim, num_layers, units, false)?;
        out_one(out_dim, output_dim(&spec) as u64, "out_dim")
    })
}

/// Effective rank of a row-major `rows × cols` feature matrix.
#[no_mangle]
pub unsafe extern "C" fn wn_effective_rank(data: *const f64, rows: usize, cols: usize, delta: f64, out_rank: *mut u64) -> WnStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("matrix too large"))?;
        let phi = Tensor::matrix(rows, cols, input(data, n, "data")?.to_vec())?;
        out_one(out_rank, effective_rank(&phi, delta)? as u64, "out_rank")
    })
}

/// New replay buffer. `uniform` disables prioritization; `seed` drives sampling.
#[no_mangle]
pub unsafe extern "C" fn wn_replay_new(
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    alpha: f64,
    priority_eps: f64,
    uniform: bool,
    seed: u64,
    out: *mut *mut WnReplay,
) -> WnStatus {
    guard(|| {
        nonnull(out, "out")?;
        if state_dim == 0 || action_dim == 0 {
            return Err(invalid("state_dim and action_dim must be positive"));
        }
        let mode = if uniform { ReplayMode::Uniform } else { ReplayMode::Prioritized };
        let buffer = PrioritizedBuffer::new(capacity, alpha, priority_eps, mode)?;
        let h = WnReplay {
            buffer,
            rng: stream_rng(seed, 0),
            state_dim,
            action_dim,
        };
        *out = Box::into_raw(Box::new(h));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn wn_replay_free(h: *mut WnReplay) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wn_replay_len(h: *const WnReplay, out_len: *mut u64) -> WnStatus {
    guard(|| {
        nonnull(h, "replay")?;
        out_one(out_len, (*h).buffer.len() as u64, "out_len")
    })
}

/// Stores one transition at the current maximum priority; `out_slot` (may be
/// null) receives its slot.
#[no_mangle]
pub unsafe extern "C" fn wn_replay_add(
    h: *mut WnReplay,
    s: *const f64,
    a: *const f64,
    r: f64,
    s_next: *const f64,
    done: bool,
    out_slot: *mut u64,
) -> WnStatus {
    guard(|| {
        nonnull(h, "replay")?;
        let h = &mut *h;
        let t = Transition {
            s: input(s, h.state_dim, "s")?.to_vec(),
            a: input(a, h.action_dim, "a")?.to_vec(),
            r,
            s_next: input(s_next, h.state_dim, "s_next")?.to_vec(),
            done,
            version: 0,
        };
        let slot = h.buffer.add(t, None)?;
        if !out_slot.is_null() {
            *out_slot = slot as u64;
        }
        Ok(())
    })
}

/// Draws `batch` slots. Each output array holds `batch` entries; the
/// generation values must be passed back to [`wn_replay_update_priorities`].
#[no_mangle]
pub unsafe extern "C" fn wn_replay_sample(
    h: *mut WnReplay,
    batch: usize,
    beta: f64,
    out_slots: *mut u64,
    out_generations: *mut u64,
    out_weights: *mut f64,
) -> WnStatus {
    guard(|| {
        nonnull(h, "replay")?;
        let h = &mut *h;
        let slots = output(out_slots, batch, "out_slots")?;
        let gens = output(out_generations, batch, "out_generations")?;
        let weights = output(out_weights, batch, "out_weights")?;
        let sb = h.buffer.sample(batch, beta, &mut h.rng)?;
        for (k, idx) in sb.indices.iter().enumerate() {
            slots[k] = idx.slot as u64;
            gens[k] = idx.generation;
        }
        weights.copy_from_slice(&sb.is_weights);
        Ok(())
    })
}

/// `p ← |td| + ε` for slots still holding the sampled transition.
#[no_mangle]
pub unsafe extern "C" fn wn_replay_update_priorities(
    h: *mut WnReplay,
    slots: *const u64,
    generations: *const u64,
    td_errors: *const f64,
    n: usize,
) -> WnStatus {
    guard(|| {
        nonnull(h, "replay")?;
        let s = if n == 0 { &[][..] } else { nonnull(slots, "slots").map(|_| slice::from_raw_parts(slots, n))? };
        let g = if n == 0 {
            &[][..]
        } else {
            nonnull(generations, "generations").map(|_| slice::from_raw_parts(generations, n))?
        };
        let td = input(td_errors, n, "td_errors")?;
        let idx: Vec<SampleIndex> = s
            .iter()
            .zip(g)
            .map(|(&slot, &generation)| SampleIndex {
                slot: slot as usize,
                generation,
            })
            .collect();
        (*h).buffer.update_priorities(&idx, td)?;
        Ok(())
    })
}

/// Environment by name: "pendulum", "pointmass" or "linsys".
#[no_mangle]
pub unsafe extern "C" fn wn_env_new(name: *const c_char, out: *mut *mut WnEnv) -> WnStatus {
    guard(|| {
        nonnull(out, "out")?;
        let env = make_env(&string(name, "name")?, None)?;
        *out = Box::into_raw(Box::new(WnEnv { env }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn wn_env_free(h: *mut WnEnv) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wn_env_dims(h: *const WnEnv, out_state_dim: *mut u64, out_action_dim: *mut u64) -> WnStatus {
    guard(|| {
        nonnull(h, "env")?;
        let spec = (*h).env.spec();
        out_one(out_state_dim, spec.state_dim as u64, "out_state_dim")?;
        out_one(out_action_dim, spec.action_dim as u64, "out_action_dim")
    })
}

/// Starts an episode; `out_state` receives `state_dim` values.
#[no_mangle]
pub unsafe extern "C" fn wn_env_reset(h: *mut WnEnv, seed: u64, out_state: *mut f64) -> WnStatus {
    guard(|| {
        nonnull(h, "env")?;
        let env = &mut (*h).env;
        let dim = env.spec().state_dim;
        let out = output(out_state, dim, "out_state")?;
        out.copy_from_slice(&env.reset(seed));
        Ok(())
    })
}

/// One step. `out_done` is set on termination or truncation.
#[no_mangle]
pub unsafe extern "C" fn wn_env_step(
    h: *mut WnEnv,
    action: *const f64,
    out_state: *mut f64,
    out_reward: *mut f64,
    out_done: *mut bool,
) -> WnStatus {
    guard(|| {
        nonnull(h, "env")?;
        let env = &mut (*h).env;
        let (sd, ad) = (env.spec().state_dim, env.spec().action_dim);
        let st = env.step(input(action, ad, "action")?)?;
        output(out_state, sd, "out_state")?.copy_from_slice(&st.state);
        out_one(out_reward, st.reward, "out_reward")?;
        out_one(out_done, st.done(), "out_done")
    })
}

/// Deterministic policy from a checkpoint written by a training run.
#[no_mangle]
pub unsafe extern "C" fn wn_policy_load(path: *const c_char, out: *mut *mut WnPolicy) -> WnStatus {
    guard(|| {
        nonnull(out, "out")?;
        let ck = Checkpoint::load(Path::new(&string(path, "path")?))?;
        let l = Learner::from_checkpoint(&ck)?;
        let h = WnPolicy {
            policy: l.policy(),
            state_dim: l.spec.state_dim,
            action_dim: l.spec.action_dim,
        };
        *out = Box::into_raw(Box::new(h));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn wn_policy_free(h: *mut WnPolicy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

#[no_mangle]
pub unsafe extern "C" fn wn_policy_dims(h: *const WnPolicy, out_state_dim: *mut u64, out_action_dim: *mut u64) -> WnStatus {
    guard(|| {
        nonnull(h, "policy")?;
        out_one(out_state_dim, (*h).state_dim as u64, "out_state_dim")?;
        out_one(out_action_dim, (*h).action_dim as u64, "out_action_dim")
    })
}

/// Deterministic actions for `rows` states (`rows × state_dim` in,
/// `rows × action_dim` out), in environment units.
#[no_mangle]
pub unsafe extern "C" fn wn_policy_act(h: *const WnPolicy, states: *const f64, rows: usize, out_actions: *mut f64) -> WnStatus {
    guard(|| {
        nonnull(h, "policy")?;
        let h = &*h;
        if rows == 0 {
            return Err(invalid("rows must be positive"));
        }
        let s = Tensor::matrix(rows, h.state_dim, input(states, rows * h.state_dim, "states")?.to_vec())?;
        let a = h.policy.act(&s, false, &mut stream_rng(0, 0))?;
        output(out_actions, rows * h.action_dim, "out_actions")?.copy_from_slice(a.data());
        Ok(())
    })
}
