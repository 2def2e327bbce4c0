//! C ABI over `rrl-core`.
//!
//! Every fallible function returns an [`RrlStatus`]; on failure the message is
//! kept per thread and can be read with [`rrl_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function. Strings are UTF-8
//! and NUL-terminated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrl_core::config::RunConfig;
use rrl_core::env::{check_solution, generate_problems, EnvKind, Problem, Tier, TokenId};
use rrl_core::error::RrlError;
use rrl_core::retro::{replay_gate, replay_probability, BufferEntry, InsertReport, Origin, ReplayBuffer};
use rrl_core::trainer::train_run;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    NotFound = 5,
    BufferTooSmall = 6,
    Runtime = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrlOrigin {
    PolicyGenerated = 0,
    Canonical = 1,
}

/// Final evaluation of a training run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RrlRunSummary {
    pub steps_completed: u64,
    pub solve_rate_overall: f64,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub initial_ppl_variance: f64,
    pub final_ppl_variance: f64,
    pub replay_attempts: u64,
    pub replay_successes: u64,
}

/// Opaque run configuration.
pub struct RrlConfig {
    config: RunConfig,
}

/// Opaque generated problem set.
pub struct RrlProblemSet {
    problems: Vec<Problem>,
}

/// Opaque replay buffer bound to a problem set's ids.
pub struct RrlBuffer {
    ids: Vec<String>,
    buffer: ReplayBuffer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &RrlError) -> RrlStatus {
    match e {
        RrlError::Config { .. } | RrlError::UnknownMode(_) => RrlStatus::Config,
        RrlError::Io { .. } | RrlError::Parse { .. } => RrlStatus::Io,
        RrlError::EntryNotFound { .. } => RrlStatus::NotFound,
        RrlError::NonFinite { .. } => RrlStatus::Runtime,
        _ => RrlStatus::InvalidArgument,
    }
}

fn fail(status: RrlStatus, msg: impl Into<String>) -> RrlStatus {
    set_error(msg);
    status
}

fn from_core(e: RrlError) -> RrlStatus {
    fail(status_of(&e), e.to_string())
}

/// Runs `f`, converting panics into [`RrlStatus::Panic`].
fn guard(f: impl FnOnce() -> RrlStatus) -> RrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RrlStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RrlStatus> {
    if p.is_null() {
        return Err(fail(RrlStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RrlStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

macro_rules! non_null {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(RrlStatus::NullPointer, concat!("`", $name, "` is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full length including the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rrl_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Replay probability for a step; `epoch` counts from 1.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rrl_replay_probability(
    epoch: u64,
    step_in_epoch: u64,
    steps_per_epoch: u64,
    beta: f64,
    out: *mut f64,
) -> RrlStatus {
    non_null!(out, "out");
    if epoch == 0 || steps_per_epoch == 0 || !(0.0..=1.0).contains(&beta) {
        return fail(RrlStatus::InvalidArgument, "epoch and steps_per_epoch must be >= 1, beta in [0, 1]");
    }
    *out = replay_probability(epoch, step_in_epoch, steps_per_epoch, beta);
    RrlStatus::Ok
}

/// Critic-stability gate over a loss history of `len` values.
///
/// # Safety
/// `history` must point to `len` doubles (or be null with `len == 0`); `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_replay_gate(
    history: *const f64,
    len: usize,
    window: usize,
    rel_tol: f64,
    max_warmup_steps: usize,
    out: *mut bool,
) -> RrlStatus {
    non_null!(out, "out");
    if history.is_null() && len > 0 {
        return fail(RrlStatus::NullPointer, "`history` is null");
    }
    let h = if len == 0 { &[][..] } else { std::slice::from_raw_parts(history, len) };
    *out = replay_gate(h, window, rel_tol, max_warmup_steps);
    RrlStatus::Ok
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer; it receives a handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn rrl_config_new(out: *mut *mut RrlConfig) -> RrlStatus {
    non_null!(out, "out");
    *out = Box::into_raw(Box::new(RrlConfig {
        config: RunConfig::default(),
    }));
    RrlStatus::Ok
}

/// Configuration parsed from TOML text.
///
/// # Safety
/// `toml_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rrl_config_from_toml(toml_text: *const c_char, out: *mut *mut RrlConfig) -> RrlStatus {
    guard(|| {
        non_null!(out, "out");
        let text = tri!(str_arg(toml_text, "toml_text"));
        let config = tri!(RunConfig::from_toml_str(text, &[]).map_err(from_core));
        *out = Box::into_raw(Box::new(RrlConfig { config }));
        RrlStatus::Ok
    })
}

/// Sets a dotted config key, e.g. `ppo.clip_eps` to `0.1`. The value is a TOML
/// literal or a bare string. The config is revalidated; on failure it is left
/// unchanged.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rrl_config_set(config: *mut RrlConfig, key: *const c_char, value: *const c_char) -> RrlStatus {
    guard(|| {
        non_null!(config, "config");
        let key = tri!(str_arg(key, "key"));
        let value = tri!(str_arg(value, "value"));
        let cfg = &mut *config;
        cfg.config = tri!(cfg.config.with_override(key, value).map_err(from_core));
        RrlStatus::Ok
    })
}

/// # Safety
/// `config` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rrl_config_free(config: *mut RrlConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Trains one run to completion, writing artifacts to the config's
/// `output_dir`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rrl_train(config: *const RrlConfig, out: *mut RrlRunSummary) -> RrlStatus {
    guard(|| {
        non_null!(config, "config");
        non_null!(out, "out");
        let s = tri!(train_run(&(*config).config).map_err(|e| {
            let status = match status_of(&e) {
                RrlStatus::InvalidArgument => RrlStatus::Runtime,
                other => other,
            };
            fail(status, e.to_string())
        }));
        let (f, i) = (&s.last_eval, &s.first_eval);
        *out = RrlRunSummary {
            steps_completed: s.steps_completed,
            solve_rate_overall: f.solve_rate_overall.unwrap_or_default(),
            initial_entropy: i.mean_policy_entropy.unwrap_or_default(),
            final_entropy: f.mean_policy_entropy.unwrap_or_default(),
            initial_ppl_variance: i.ppl_variance.map(|p| p.mean).unwrap_or_default(),
            final_ppl_variance: f.ppl_variance.map(|p| p.mean).unwrap_or_default(),
            replay_attempts: f.replay_attempts,
            replay_successes: f.replay_successes,
        };
        RrlStatus::Ok
    })
}

/// Generates `count` problems. `env_kind` is `arith_target`, `grammar_fill`
/// or `grid_path`; `tier` is `easy`, `medium` or `hard`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_problems_generate(
    env_kind: *const c_char,
    tier: *const c_char,
    count: usize,
    seed: u64,
    out: *mut *mut RrlProblemSet,
) -> RrlStatus {
    guard(|| {
        non_null!(out, "out");
        let kind: EnvKind = tri!(tri!(str_arg(env_kind, "env_kind")).parse().map_err(from_core));
        let tier: Tier = tri!(tri!(str_arg(tier, "tier")).parse().map_err(from_core));
        let problems = tri!(generate_problems(kind, tier, count, seed).map_err(from_core));
        *out = Box::into_raw(Box::new(RrlProblemSet { problems }));
        RrlStatus::Ok
    })
}

/// # Safety
/// `set` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_problems_len(set: *const RrlProblemSet, out: *mut usize) -> RrlStatus {
    non_null!(set, "set");
    non_null!(out, "out");
    *out = (*set).problems.len();
    RrlStatus::Ok
}

unsafe fn problem_at<'a>(set: *const RrlProblemSet, index: usize) -> Result<&'a Problem, RrlStatus> {
    if set.is_null() {
        return Err(fail(RrlStatus::NullPointer, "`set` is null"));
    }
    let set = &*set;
    set.problems
        .get(index)
        .ok_or_else(|| fail(RrlStatus::InvalidArgument, format!("problem index {index} out of range")))
}

fn copy_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> RrlStatus {
    unsafe {
        if !needed.is_null() {
            *needed = text.len() + 1;
        }
        if buf.is_null() || cap < text.len() + 1 {
            return fail(RrlStatus::BufferTooSmall, format!("need {} bytes", text.len() + 1));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
    }
    RrlStatus::Ok
}

/// Space-separated canonical solution of problem `index`. `needed` (optional)
/// receives the required size including the terminator.
///
/// # Safety
/// `set` must be live; `buf` null or `cap` writable bytes; `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_problem_canonical(
    set: *const RrlProblemSet,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> RrlStatus {
    guard(|| {
        let p = tri!(problem_at(set, index));
        copy_text(&p.vocabulary().render(&p.canonical), buf, cap, needed)
    })
}

/// Checks a space-separated solution against problem `index`.
///
/// # Safety
/// `set` must be live, `solution` NUL-terminated and `solved` valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_problem_check(
    set: *const RrlProblemSet,
    index: usize,
    solution: *const c_char,
    solved: *mut bool,
) -> RrlStatus {
    guard(|| {
        non_null!(solved, "solved");
        let p = tri!(problem_at(set, index));
        let text = tri!(str_arg(solution, "solution"));
        let tokens = tri!(p.vocabulary().parse(text).map_err(from_core));
        *solved = check_solution(p, &tokens).is_solved();
        RrlStatus::Ok
    })
}

/// # Safety
/// `set` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rrl_problems_free(set: *mut RrlProblemSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Empty replay buffer over the problems of `set`.
///
/// # Safety
/// `set` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_new(set: *const RrlProblemSet, out: *mut *mut RrlBuffer) -> RrlStatus {
    non_null!(set, "set");
    non_null!(out, "out");
    let ids: Vec<String> = (*set).problems.iter().map(|p| p.id.clone()).collect();
    let buffer = ReplayBuffer::new(ids.iter().cloned());
    *out = Box::into_raw(Box::new(RrlBuffer { ids, buffer }));
    RrlStatus::Ok
}

unsafe fn entry_from(
    buf: &RrlBuffer,
    problem: usize,
    tokens: *const u32,
    len: usize,
    origin: RrlOrigin,
) -> Result<BufferEntry, RrlStatus> {
    let id = buf
        .ids
        .get(problem)
        .ok_or_else(|| fail(RrlStatus::InvalidArgument, format!("problem index {problem} out of range")))?;
    if tokens.is_null() && len > 0 {
        return Err(fail(RrlStatus::NullPointer, "`tokens` is null"));
    }
    let state: Vec<TokenId> = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(tokens, len).to_vec() };
    Ok(BufferEntry {
        problem_id: id.clone(),
        state,
        origin: match origin {
            RrlOrigin::PolicyGenerated => Origin::PolicyGenerated,
            RrlOrigin::Canonical => Origin::Canonical,
        },
        value_at_insert: 0.0,
        counter: 0,
        inserted_step: 0,
    })
}

/// Inserts a state. `inserted` is false for duplicates; `evicted` (optional)
/// reports whether a full list dropped its highest-counter entry.
///
/// # Safety
/// `buffer` must be live; `tokens` must point to `len` ids; out pointers valid
/// or null where documented.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_insert(
    buffer: *mut RrlBuffer,
    problem: usize,
    tokens: *const u32,
    len: usize,
    origin: RrlOrigin,
    value: f64,
    step: u64,
    inserted: *mut bool,
    evicted: *mut bool,
) -> RrlStatus {
    guard(|| {
        non_null!(buffer, "buffer");
        non_null!(inserted, "inserted");
        let b = &mut *buffer;
        let mut e = tri!(entry_from(b, problem, tokens, len, origin));
        e.value_at_insert = value;
        e.inserted_step = step;
        let report = tri!(b.buffer.insert(e).map_err(from_core));
        *inserted = matches!(report, InsertReport::Inserted { .. });
        if !evicted.is_null() {
            *evicted = matches!(report, InsertReport::Inserted { evicted: Some(_) });
        }
        RrlStatus::Ok
    })
}

/// Number of buffered states for problem `problem`.
///
/// # Safety
/// `buffer` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_len(buffer: *const RrlBuffer, problem: usize, out: *mut usize) -> RrlStatus {
    non_null!(buffer, "buffer");
    non_null!(out, "out");
    let b = &*buffer;
    match b.ids.get(problem) {
        Some(id) => {
            *out = b.buffer.entries_for(id).len();
            RrlStatus::Ok
        }
        None => fail(RrlStatus::InvalidArgument, format!("problem index {problem} out of range")),
    }
}

/// Draws a state for `problem` with weight 1/(1+counter) using a generator
/// seeded by `seed`. Writes up to `cap` ids to `tokens`, the state length to
/// `len` and its origin to `origin`. Returns `NotFound` on an empty list.
///
/// # Safety
/// `buffer` must be live; `tokens` must have room for `cap` ids; `len` and
/// `origin` valid.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_select(
    buffer: *const RrlBuffer,
    problem: usize,
    seed: u64,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
    origin: *mut RrlOrigin,
) -> RrlStatus {
    guard(|| {
        non_null!(buffer, "buffer");
        non_null!(len, "len");
        non_null!(origin, "origin");
        let b = &*buffer;
        let Some(id) = b.ids.get(problem) else {
            return fail(RrlStatus::InvalidArgument, format!("problem index {problem} out of range"));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(e) = b.buffer.select(id, &mut rng) else {
            return fail(RrlStatus::NotFound, format!("no buffered state for problem {problem}"));
        };
        *len = e.state.len();
        *origin = match e.origin {
            Origin::PolicyGenerated => RrlOrigin::PolicyGenerated,
            Origin::Canonical => RrlOrigin::Canonical,
        };
        if tokens.is_null() || cap < e.state.len() {
            return fail(RrlStatus::BufferTooSmall, format!("need room for {} ids", e.state.len()));
        }
        ptr::copy_nonoverlapping(e.state.as_ptr(), tokens, e.state.len());
        RrlStatus::Ok
    })
}

/// Records a replay outcome: the counter increments, and a solved replay
/// removes the state.
///
/// # Safety
/// `buffer` must be live and `tokens` point to `len` ids.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_record(
    buffer: *mut RrlBuffer,
    problem: usize,
    tokens: *const u32,
    len: usize,
    origin: RrlOrigin,
    solved: bool,
) -> RrlStatus {
    guard(|| {
        non_null!(buffer, "buffer");
        let b = &mut *buffer;
        let e = tri!(entry_from(b, problem, tokens, len, origin));
        tri!(b.buffer.record_outcome(&e, solved).map_err(from_core));
        RrlStatus::Ok
    })
}

/// # Safety
/// `buffer` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rrl_buffer_free(buffer: *mut RrlBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}
