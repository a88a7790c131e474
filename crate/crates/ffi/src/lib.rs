//! C ABI over `cotrain-core`.
//!
//! Fallible functions return a [`CotrainStatus`]; on failure the message is
//! available from [`cotrain_last_error`] on the same thread. Trainers are
//! opaque handles created by [`cotrain_trainer_new`] and released with
//! [`cotrain_trainer_free`]. Strings handed out by a trainer stay valid until
//! the next call on that trainer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cotrain::feedback::standardize;
use cotrain::harness::{RunConfig, Trainer};
use cotrain::theory::{exact_precision, hoeffding_bound, PrecisionQuery};
use cotrain::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotrainStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Argument = 4,
    State = 5,
    Numeric = 6,
    Io = 7,
    Json = 8,
    Other = 9,
    Panic = 10,
}

/// Outcome probabilities of a majority comparison between two label sets.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CotrainPrecision {
    pub a_strict: f64,
    pub p_tie: f64,
    pub p_below: f64,
}

/// Opaque training handle.
pub struct CotrainTrainer {
    inner: Trainer,
    text: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> CotrainStatus {
    match err {
        Error::Config(_) => CotrainStatus::Config,
        Error::Argument(_) | Error::Range(_) | Error::Domain(_) => CotrainStatus::Argument,
        Error::State(_) => CotrainStatus::State,
        Error::Numeric(_) => CotrainStatus::Numeric,
        Error::Io(_) => CotrainStatus::Io,
        Error::Json(_) => CotrainStatus::Json,
        _ => CotrainStatus::Other,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (CotrainStatus, String)>) -> CotrainStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CotrainStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cotrain");
            CotrainStatus::Panic
        }
    }
}

fn core<T>(r: cotrain::Result<T>) -> Result<T, (CotrainStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CotrainStatus, String) {
    (CotrainStatus::NullPointer, format!("{what} is null"))
}

fn json_text(value: &impl serde::Serialize) -> Result<CString, (CotrainStatus, String)> {
    let s = serde_json::to_string(value).map_err(|e| (CotrainStatus::Json, e.to_string()))?;
    CString::new(s).map_err(|e| (CotrainStatus::Other, e.to_string()))
}

/// Message from the last call on this thread; empty if it succeeded.
/// Valid until the next cotrain call on the same thread.
#[no_mangle]
pub extern "C" fn cotrain_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cotrain_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a trainer from a JSON run config (`NULL` for defaults).
///
/// # Safety
/// `config_json` must be NULL or a valid NUL-terminated string; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut CotrainTrainer,
) -> CotrainStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = if config_json.is_null() {
            RunConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|e| (CotrainStatus::InvalidUtf8, e.to_string()))?;
            core(RunConfig::from_json(text))?
        };
        let tasks = core(config.load_task_set())?;
        let inner = core(Trainer::new(config, tasks, seed))?;
        *out = Box::into_raw(Box::new(CotrainTrainer {
            inner,
            text: CString::default(),
        }));
        Ok(())
    })
}

/// Releases a trainer. NULL is ignored.
///
/// # Safety
/// `trainer` must be NULL or a handle from [`cotrain_trainer_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_free(trainer: *mut CotrainTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs one training step. When `metrics_json` is non-NULL it receives the
/// step's metrics record as JSON, owned by the trainer.
///
/// # Safety
/// `trainer` must be a live handle; `metrics_json` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_step(
    trainer: *mut CotrainTrainer,
    metrics_json: *mut *const c_char,
) -> CotrainStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        if t.inner.is_done() {
            return Err((CotrainStatus::State, "all configured steps have run".into()));
        }
        let rec = core(t.inner.step())?;
        if !metrics_json.is_null() {
            t.text = json_text(&rec)?;
            *metrics_json = t.text.as_ptr();
        }
        Ok(())
    })
}

/// Number of completed steps, or -1 for a NULL handle.
///
/// # Safety
/// `trainer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_steps_done(trainer: *const CotrainTrainer) -> i64 {
    trainer.as_ref().map_or(-1, |t| t.inner.step_index() as i64)
}

/// 1 when every configured step has run, 0 otherwise, -1 for NULL.
///
/// # Safety
/// `trainer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_is_done(trainer: *const CotrainTrainer) -> i32 {
    trainer.as_ref().map_or(-1, |t| i32::from(t.inner.is_done()))
}

/// Run summary as JSON, owned by the trainer.
///
/// # Safety
/// `trainer` must be a live handle and `summary_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cotrain_trainer_summary(
    trainer: *mut CotrainTrainer,
    summary_json: *mut *const c_char,
) -> CotrainStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        if summary_json.is_null() {
            return Err(null("summary_json"));
        }
        t.text = json_text(&t.inner.summary())?;
        *summary_json = t.text.as_ptr();
        Ok(())
    })
}

/// Exact probability that `m` correct labels outvote `m` wrong ones.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cotrain_exact_precision(
    p_plus: f64,
    p_minus: f64,
    m: usize,
    out: *mut CotrainPrecision,
) -> CotrainStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = exact_precision(&core(PrecisionQuery::new(p_plus, p_minus, m))?);
        *out = CotrainPrecision {
            a_strict: p.a_strict,
            p_tie: p.p_tie,
            p_below: p.p_below,
        };
        Ok(())
    })
}

/// Concentration lower bound on the majority precision for `mu > 1`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cotrain_hoeffding_bound(mu: f64, m: usize, out: *mut f64) -> CotrainStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(hoeffding_bound(mu, m))?;
        Ok(())
    })
}

/// Standardizes `len` values into `out` (population σ, zeros when flat).
/// `values` and `out` may alias.
///
/// # Safety
/// Both pointers must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn cotrain_standardize(values: *const f64, len: usize, out: *mut f64) -> CotrainStatus {
    guard(|| {
        if len == 0 {
            return Ok(());
        }
        if values.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let z = standardize(std::slice::from_raw_parts(values, len));
        ptr::copy_nonoverlapping(z.as_ptr(), out, len);
        Ok(())
    })
}
