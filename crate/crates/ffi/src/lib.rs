//! C ABI over the policy engine, the environments and the wire codec.
//!
//! Every function returns an [`RlaasStatus`]. On failure the message is kept
//! per thread and read with [`rlaas_last_error`]. Handles are opaque and must
//! be released with their `_free` function. String outputs are written into
//! caller buffers with a trailing NUL; when a buffer is too small the call
//! returns `RLAAS_BUFFER_TOO_SMALL` and stores the needed size (NUL included)
//! in `*needed` if that pointer is non-null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rlaas::env::{EnvHost, EnvKind, ResetRequest, StepRequest};
use rlaas::fsm::generate_action;
use rlaas::policy::{codec, episode_rng, CheckpointStore, Decoding, PolicyParams, VersionSel};
use rlaas::protocol;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlaasStatus {
    RlaasOk = 0,
    RlaasNullPointer = 1,
    RlaasInvalidUtf8 = 2,
    RlaasInvalidArgument = 3,
    RlaasEnvError = 4,
    RlaasCheckpointError = 5,
    RlaasProtocolError = 6,
    RlaasBufferTooSmall = 7,
    RlaasPanic = 8,
}

use RlaasStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, RlaasStatus>;

fn fail<T>(status: RlaasStatus, msg: impl Into<String>) -> FfiResult<T> {
    set_error(msg);
    Err(status)
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> RlaasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RlaasOk,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            RlaasPanic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(RlaasNullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(RlaasInvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_str(s: &str, out: *mut c_char, cap: usize, needed: *mut usize) -> FfiResult<()> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if out.is_null() || cap < n {
        return fail(RlaasBufferTooSmall, format!("need {n} bytes, have {cap}"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), out.cast::<u8>(), s.len());
    *out.add(s.len()) = 0;
    Ok(())
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().map_or_else(|| fail(RlaasNullPointer, format!("{what} is null")), Ok)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rlaas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Opaque token policy.
pub struct RlaasPolicy {
    params: PolicyParams,
}

/// A zero-weight (uniform) policy over a context window of `window` tokens.
#[no_mangle]
pub unsafe extern "C" fn rlaas_policy_new(window: usize, out: *mut *mut RlaasPolicy) -> RlaasStatus {
    guard(|| {
        if out.is_null() {
            return fail(RlaasNullPointer, "out is null");
        }
        if window == 0 {
            return fail(RlaasInvalidArgument, "window must be positive");
        }
        *out = Box::into_raw(Box::new(RlaasPolicy { params: PolicyParams::new(window) }));
        Ok(())
    })
}

/// Loads a policy from a checkpoint store; `version < 0` means the latest.
#[no_mangle]
pub unsafe extern "C" fn rlaas_policy_load(store: *const c_char, version: i64, out: *mut *mut RlaasPolicy) -> RlaasStatus {
    guard(|| {
        let dir = read_str(store, "store")?;
        if out.is_null() {
            return fail(RlaasNullPointer, "out is null");
        }
        let sel = if version < 0 { VersionSel::Latest } else { VersionSel::Exact(version as u64) };
        let ckpt = CheckpointStore::open(dir)
            .and_then(|s| s.load(sel))
            .or_else(|e| fail(RlaasCheckpointError, e.to_string()))?;
        *out = Box::into_raw(Box::new(RlaasPolicy { params: ckpt.params }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn rlaas_policy_free(policy: *mut RlaasPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Decodes one action after `prompt`. `sample == 0` decodes greedily;
/// otherwise `seed` drives sampling. The end-of-action token is stripped.
#[no_mangle]
pub unsafe extern "C" fn rlaas_policy_generate(
    policy: *const RlaasPolicy,
    prompt: *const c_char,
    max_tokens: usize,
    sample: i32,
    seed: u64,
    out: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RlaasStatus {
    guard(|| {
        let policy = policy.as_ref().map_or_else(|| fail(RlaasNullPointer, "policy is null"), Ok)?;
        let prompt = read_str(prompt, "prompt")?;
        let ctx = codec::encode(prompt).or_else(|e| fail(RlaasInvalidArgument, e.to_string()))?;
        let decoding = if sample == 0 { Decoding::Greedy } else { Decoding::Sample };
        let action = generate_action(&policy.params, &ctx, decoding, max_tokens, &mut episode_rng(seed));
        let body: Vec<_> = action.into_iter().filter(|t| !t.is_end_of_action()).collect();
        write_str(&codec::decode(&body), out, cap, needed)
    })
}

/// Opaque single-episode environment.
pub struct RlaasEnv {
    host: EnvHost,
    kind: EnvKind,
    episode: Option<String>,
}

/// `kind` is "gomoku" or "arith".
#[no_mangle]
pub unsafe extern "C" fn rlaas_env_new(kind: *const c_char, out: *mut *mut RlaasEnv) -> RlaasStatus {
    guard(|| {
        let kind: EnvKind = read_str(kind, "kind")?.parse().or_else(|e: rlaas::env::EnvError| fail(RlaasInvalidArgument, e.to_string()))?;
        if kind == EnvKind::GomokuTwoAgent {
            return fail(RlaasInvalidArgument, "two-agent games need the env server");
        }
        if out.is_null() {
            return fail(RlaasNullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(RlaasEnv { host: EnvHost::new(kind), kind, episode: None }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn rlaas_env_free(env: *mut RlaasEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts a new episode and writes the rendered state.
#[no_mangle]
pub unsafe extern "C" fn rlaas_env_reset(
    env: *mut RlaasEnv,
    seed: u64,
    out: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RlaasStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let req = ResetRequest { kind: Some(env.kind), seed, seat: None, match_id: None };
        let reply = env.host.reset(&req).or_else(|e| fail(RlaasEnvError, e.to_string()))?;
        env.episode = Some(reply.episode_id);
        write_str(&reply.state, out, cap, needed)
    })
}

/// Applies `action` to the current episode. Writes the new state, the step
/// score and whether the episode ended.
#[no_mangle]
pub unsafe extern "C" fn rlaas_env_step(
    env: *mut RlaasEnv,
    action: *const c_char,
    score: *mut f64,
    done: *mut i32,
    out: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RlaasStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let action = read_str(action, "action")?;
        let Some(episode_id) = env.episode.clone() else {
            return fail(RlaasEnvError, "no episode; call rlaas_env_reset first");
        };
        let req = StepRequest { episode_id, action_text: action.to_string(), seat: None, observe: false };
        let r = env.host.step(&req).or_else(|e| fail(RlaasEnvError, e.to_string()))?;
        if !score.is_null() {
            *score = r.score;
        }
        if !done.is_null() {
            *done = r.done as i32;
        }
        write_str(&r.state.text, out, cap, needed)
    })
}

/// Validates one wire frame and writes its canonical encoding.
#[no_mangle]
pub unsafe extern "C" fn rlaas_protocol_canonicalize(
    frame: *const c_char,
    out: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RlaasStatus {
    guard(|| {
        let frame = read_str(frame, "frame")?;
        let mut bytes = frame.as_bytes().to_vec();
        if !bytes.ends_with(b"\n") {
            bytes.push(b'\n');
        }
        let msg = protocol::decode(&bytes).or_else(|e| fail(RlaasProtocolError, format!("{}: {e}", e.code())))?;
        let enc = protocol::encode(&msg).or_else(|e| fail(RlaasProtocolError, e.to_string()))?;
        write_str(&String::from_utf8_lossy(&enc), out, cap, needed)
    })
}
