//! C ABI for the rewind-guard runtime monitor.
//!
//! Every fallible function returns an [`RgStatus`]. On failure a message is
//! kept per thread and can be read with [`rg_last_error_message`]. Arrays are
//! caller-owned, row-major `double` buffers passed with their element count.
//! Handles are opaque; each `*_new`/`*_open` has a matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array1, Array3};
use rewind_guard::checkpoint::load_database;
use rewind_guard::conformal::{cp_threshold_scores, Threshold};
use rewind_guard::ensemble::Ensembler;
use rewind_guard::tide::compute_tide;
use rewind_guard::tracker::Guard;
use rewind_guard::types::{ActionChunk, AggregatedPlan, FeatureVector, GuardConfig};
use rewind_guard::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Data = 4,
    Config = 5,
    Protocol = 6,
    Io = 7,
    Panic = 8,
}

/// One TIDE score. `valid` is false when the plan held no prior prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgTide {
    pub value: f64,
    pub valid: bool,
}

/// Per-step guard decision.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgStep {
    pub t: u64,
    pub tide: RgTide,
    pub flagged: bool,
    pub recovered: bool,
    pub respawning: bool,
    /// Zero-based latest peaked slot, or -1 when none has peaked.
    pub k_star: i64,
}

/// Temporal ensembler over overlapping action chunks.
pub struct RgEnsembler {
    inner: Ensembler,
    shape: (usize, usize, usize),
}

/// Online guard: ensembling, failure detection and checkpoint respawning.
pub struct RgGuard {
    inner: Guard,
    shape: (usize, usize, usize),
    similarities: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => RgStatus::Dimension,
            Error::InvalidInput(_) => RgStatus::InvalidArgument,
            Error::Schema(_) | Error::Parse { .. } => RgStatus::Data,
            Error::Config(_) => RgStatus::Config,
            Error::Protocol(_) => RgStatus::Protocol,
            Error::Io { .. } => RgStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> RgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            RgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(ptr: *mut T) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null("handle"))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(RgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn chunk(values: &[f64], (b, h, d): (usize, usize, usize)) -> Result<ActionChunk, Failure> {
    if values.len() != b * h * d {
        return Err(Failure(
            RgStatus::Dimension,
            format!("chunk has {} values, expected {b} x {h} x {d}", values.len()),
        ));
    }
    let arr = Array3::from_shape_vec((b, h, d), values.to_vec()).expect("length checked");
    Ok(ActionChunk::new(arr)?)
}

fn copy_out(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Failure(
            RgStatus::Dimension,
            format!("{what} buffer holds {} values, expected {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Split-conformal threshold of `n` calibration scores at miscoverage `alpha`.
///
/// Writes `INFINITY` when the corpus is too small for the requested rate.
///
/// # Safety
/// `scores` must point to `n` readable doubles; `out_q_hat` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rg_cp_threshold(scores: *const f64, n: usize, alpha: f64, out_q_hat: *mut f64) -> RgStatus {
    guarded(|| {
        let scores = input(scores, n, "scores")?;
        let out = out_ref(out_q_hat, "out_q_hat")?;
        *out = cp_threshold_scores(scores, alpha)?;
        Ok(())
    })
}

/// Reads `q_hat` from a threshold file written by `rewind-guard calibrate`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_q_hat` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rg_threshold_load(path: *const c_char, out_q_hat: *mut f64) -> RgStatus {
    guarded(|| {
        let path = c_str(path, "path")?;
        let out = out_ref(out_q_hat, "out_q_hat")?;
        *out = Threshold::load(Path::new(path))?.q_hat;
        Ok(())
    })
}

/// TIDE between an aggregated plan and a fresh chunk.
///
/// `plan` is `batch x overlap x action_dim`, `weights` has `overlap` entries
/// (zero marks a step with no prediction) and `chunk` is
/// `batch x horizon x action_dim` with `horizon >= overlap`.
///
/// # Safety
/// Each array must hold the number of doubles implied by its shape;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rg_tide(
    plan: *const f64,
    weights: *const f64,
    batch: usize,
    overlap: usize,
    action_dim: usize,
    chunk_values: *const f64,
    horizon: usize,
    out: *mut RgTide,
) -> RgStatus {
    guarded(|| {
        let plan = input(plan, batch * overlap * action_dim, "plan")?;
        let weights = input(weights, overlap, "weights")?;
        let fresh = input(chunk_values, batch * horizon * action_dim, "chunk")?;
        let out = out_ref(out, "out")?;
        let values = Array3::from_shape_vec((batch, overlap, action_dim), plan.to_vec()).expect("length matches shape");
        let plan = AggregatedPlan::new(values, Array1::from(weights.to_vec()), 0)?;
        let score = compute_tide(&plan, &chunk(fresh, (batch, horizon, action_dim))?)?;
        *out = RgTide { value: score.value, valid: score.valid };
        Ok(())
    })
}

/// Creates an ensembler with weights `exp(-m * age)`.
///
/// # Safety
/// `out` must be writable. Release the handle with [`rg_ensembler_free`].
#[no_mangle]
pub unsafe extern "C" fn rg_ensembler_new(
    batch: usize,
    horizon: usize,
    action_dim: usize,
    overlap: usize,
    m: f64,
    out: *mut *mut RgEnsembler,
) -> RgStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        let inner = Ensembler::new(batch, horizon, action_dim, overlap, m)?;
        *out = Box::into_raw(Box::new(RgEnsembler { inner, shape: (batch, horizon, action_dim) }));
        Ok(())
    })
}

/// Scores a fresh chunk against the current plan, merges it and advances.
///
/// The executed action (`batch x action_dim`) goes to `out_action`.
/// `out_tide` may be NULL.
///
/// # Safety
/// `h` must come from [`rg_ensembler_new`]; buffers must hold the stated
/// number of doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_ensembler_push(
    h: *mut RgEnsembler,
    chunk_values: *const f64,
    chunk_len: usize,
    out_action: *mut f64,
    action_len: usize,
    out_tide: *mut RgTide,
) -> RgStatus {
    guarded(|| {
        let h = handle(h)?;
        let fresh = chunk(input(chunk_values, chunk_len, "chunk")?, h.shape)?;
        let action = output(out_action, action_len, "out_action")?;
        if action.len() != h.shape.0 * h.shape.2 {
            return Err(Failure(RgStatus::Dimension, format!("out_action holds {} values", action.len())));
        }
        let (executed, plan) = h.inner.push_chunk(&fresh)?;
        let score = compute_tide(&plan, &fresh)?;
        copy_out(action, executed.as_slice().expect("standard layout"), "out_action")?;
        if let Some(t) = out_tide.as_mut() {
            *t = RgTide { value: score.value, valid: score.valid };
        }
        Ok(())
    })
}

/// Drops every pending prediction.
///
/// # Safety
/// `h` must come from [`rg_ensembler_new`].
#[no_mangle]
pub unsafe extern "C" fn rg_ensembler_reset(h: *mut RgEnsembler) -> RgStatus {
    guarded(|| {
        handle(h)?.inner.reset();
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`rg_ensembler_new`] and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rg_ensembler_free(h: *mut RgEnsembler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Opens a guard over a checkpoint database file.
///
/// `config_json` is a JSON guard configuration; NULL selects the defaults.
/// `q_hat` is the detection threshold, e.g. from [`rg_threshold_load`].
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable. Release the handle
/// with [`rg_guard_free`].
#[no_mangle]
pub unsafe extern "C" fn rg_guard_open(
    config_json: *const c_char,
    database_path: *const c_char,
    q_hat: f64,
    batch: usize,
    action_dim: usize,
    out: *mut *mut RgGuard,
) -> RgStatus {
    guarded(|| {
        let out = out_ref(out, "out")?;
        let cfg: GuardConfig = if config_json.is_null() {
            GuardConfig::default()
        } else {
            serde_json::from_str(c_str(config_json, "config_json")?)
                .map_err(|e| Failure(RgStatus::Config, format!("guard config: {e}")))?
        };
        let db = load_database(Path::new(c_str(database_path, "database_path")?))?;
        let shape = (batch, cfg.chunk_horizon, action_dim);
        let inner = Guard::new(cfg, db, q_hat, batch, action_dim)?;
        let similarities = vec![f64::NAN; inner.tracker().num_slots()];
        *out = Box::into_raw(Box::new(RgGuard { inner, shape, similarities }));
        Ok(())
    })
}

/// Number of checkpoint slots tracked by the guard, or 0 for NULL.
///
/// # Safety
/// `h` must be NULL or come from [`rg_guard_open`].
#[no_mangle]
pub unsafe extern "C" fn rg_guard_num_slots(h: *const RgGuard) -> usize {
    h.as_ref().map_or(0, |g| g.similarities.len())
}

/// Enables or disables respawning; flags are still reported when disabled.
///
/// # Safety
/// `h` must come from [`rg_guard_open`].
#[no_mangle]
pub unsafe extern "C" fn rg_guard_set_intervention(h: *mut RgGuard, on: bool) -> RgStatus {
    guarded(|| {
        let g = handle(h)?;
        g.inner = g.inner.clone().with_intervention(on);
        Ok(())
    })
}

/// Runs one control step: the policy's chunk and the current feature vector
/// in, the command to execute out.
///
/// `out_action` receives `batch x action_dim` values. `out_step` may be NULL.
///
/// # Safety
/// `h` must come from [`rg_guard_open`]; buffers must hold the stated number
/// of doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_guard_step(
    h: *mut RgGuard,
    chunk_values: *const f64,
    chunk_len: usize,
    feature: *const f64,
    feature_len: usize,
    out_action: *mut f64,
    action_len: usize,
    out_step: *mut RgStep,
) -> RgStatus {
    guarded(|| {
        let g = handle(h)?;
        let fresh = chunk(input(chunk_values, chunk_len, "chunk")?, g.shape)?;
        let feature = FeatureVector::from_vec(input(feature, feature_len, "feature")?.to_vec())?;
        let action = output(out_action, action_len, "out_action")?;
        if action.len() != g.shape.0 * g.shape.2 {
            return Err(Failure(RgStatus::Dimension, format!("out_action holds {} values", action.len())));
        }
        let o = g.inner.step(&fresh, &feature)?;
        copy_out(action, &o.action, "out_action")?;
        g.similarities.copy_from_slice(&o.similarities);
        if let Some(s) = out_step.as_mut() {
            *s = RgStep {
                t: o.t as u64,
                tide: RgTide { value: o.tide.value, valid: o.tide.valid },
                flagged: o.flagged,
                recovered: o.recovered,
                respawning: o.respawning,
                k_star: o.k_star.map_or(-1, |k| k as i64),
            };
        }
        Ok(())
    })
}

/// Cosine similarities of the last step's feature to each slot template.
///
/// # Safety
/// `h` must come from [`rg_guard_open`]; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_guard_similarities(h: *const RgGuard, out: *mut f64, len: usize) -> RgStatus {
    guarded(|| {
        let g = h.as_ref().ok_or_else(|| null("handle"))?;
        copy_out(output(out, len, "out")?, &g.similarities, "out")
    })
}

/// Ends a respawn early once the system has reached the checkpoint.
///
/// # Safety
/// `h` must come from [`rg_guard_open`].
#[no_mangle]
pub unsafe extern "C" fn rg_guard_respawn_reached(h: *mut RgGuard) -> RgStatus {
    guarded(|| {
        handle(h)?.inner.respawn_reached();
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`rg_guard_open`] and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rg_guard_free(h: *mut RgGuard) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
