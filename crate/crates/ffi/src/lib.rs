//! C ABI over a trained attenmix checkpoint.
//!
//! Every fallible call returns an [`AtmxStatus`]; on failure the message is
//! available from [`atmx_last_error`] on the same thread. Item indices are the
//! dense `1..=num_items` indices of the checkpoint vocabulary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use attenmix::eval::hr_mrr;
use attenmix::model::forward;
use attenmix::training::{load_checkpoint, Checkpoint, TrainError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtmxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    VersionMismatch = 5,
    UnknownItem = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Opaque loaded model.
pub struct AtmxModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: AtmxStatus, msg: impl Into<String>) -> AtmxStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> AtmxStatus) -> AtmxStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(AtmxStatus::Internal, "panic inside attenmix"))
}

fn train_status(e: &TrainError) -> AtmxStatus {
    match e {
        TrainError::Io(_) => AtmxStatus::Io,
        TrainError::CorruptCheckpoint(_) => AtmxStatus::CorruptCheckpoint,
        TrainError::VersionMismatch { .. } => AtmxStatus::VersionMismatch,
        _ => AtmxStatus::Internal,
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next attenmix call on this thread.
#[no_mangle]
pub extern "C" fn atmx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a model to be released with
/// [`atmx_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atmx_model_load(path: *const c_char, out: *mut *mut AtmxModel) -> AtmxStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AtmxStatus::NullPointer, "null path or output pointer");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(AtmxStatus::InvalidArgument, "path is not UTF-8");
        };
        match load_checkpoint(Path::new(p)) {
            Ok(ckpt) => {
                *out = Box::into_raw(Box::new(AtmxModel { ckpt }));
                AtmxStatus::Ok
            }
            Err(e) => fail(train_status(&e), e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`atmx_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn atmx_model_free(model: *mut AtmxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn atmx_model_num_items(model: *const AtmxModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.params.num_items())
}

/// Embedding width, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn atmx_model_dim(model: *const AtmxModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.hyper().dim)
}

/// Dense index of an external item id.
///
/// # Safety
/// `model` must be a live model, `id` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn atmx_item_index(model: *const AtmxModel, id: *const c_char, out: *mut u32) -> AtmxStatus {
    guard(|| {
        let (Some(m), false, false) = (model.as_ref(), id.is_null(), out.is_null()) else {
            return fail(AtmxStatus::NullPointer, "null argument");
        };
        let id = CStr::from_ptr(id).to_string_lossy();
        match m.ckpt.vocabulary().index_of(&id) {
            Some(i) => {
                *out = i;
                AtmxStatus::Ok
            }
            None => fail(AtmxStatus::UnknownItem, format!("unknown item id {id}")),
        }
    })
}

/// Copies the external id of `index` into `buf` with a trailing NUL. `*len`
/// receives the id length without the NUL, also when `buf` is too small.
///
/// # Safety
/// `model` must be a live model, `buf` valid for `cap` bytes (or null with
/// `cap == 0`) and `len` valid.
#[no_mangle]
pub unsafe extern "C" fn atmx_item_id(
    model: *const AtmxModel,
    index: u32,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> AtmxStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), len.is_null()) else {
            return fail(AtmxStatus::NullPointer, "null argument");
        };
        let Some(id) = m.ckpt.vocabulary().external_id(index) else {
            return fail(AtmxStatus::UnknownItem, format!("no item at index {index}"));
        };
        *len = id.len();
        if buf.is_null() || cap < id.len() + 1 {
            return fail(AtmxStatus::BufferTooSmall, format!("id needs {} bytes", id.len() + 1));
        }
        ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, id.len());
        *buf.add(id.len()) = 0;
        AtmxStatus::Ok
    })
}

unsafe fn session<'a>(m: &AtmxModel, items: *const u32, n: usize) -> Result<&'a [u32], AtmxStatus> {
    if items.is_null() || n == 0 {
        return Err(fail(AtmxStatus::InvalidArgument, "empty session"));
    }
    let s = std::slice::from_raw_parts(items, n);
    let v = m.ckpt.params.num_items() as u32;
    if let Some(&bad) = s.iter().find(|&&i| i == 0 || i > v) {
        return Err(fail(AtmxStatus::UnknownItem, format!("item index {bad} outside 1..={v}")));
    }
    Ok(s)
}

fn distribution(m: &AtmxModel, items: &[u32]) -> Result<Vec<f64>, AtmxStatus> {
    forward(items, &m.ckpt.params, m.ckpt.hyper())
        .map(|d| d.probs)
        .map_err(|e| fail(AtmxStatus::Internal, e.to_string()))
}

/// Next-item probabilities for a session: `probs[i]` is item `i + 1`.
/// `cap` must be at least [`atmx_model_num_items`].
///
/// # Safety
/// `items` must hold `n` indices and `probs` be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn atmx_score_session(
    model: *const AtmxModel,
    items: *const u32,
    n: usize,
    probs: *mut f64,
    cap: usize,
) -> AtmxStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), probs.is_null()) else {
            return fail(AtmxStatus::NullPointer, "null argument");
        };
        let s = match session(m, items, n) {
            Ok(s) => s,
            Err(st) => return st,
        };
        if cap < m.ckpt.params.num_items() {
            return fail(AtmxStatus::BufferTooSmall, format!("need {} slots", m.ckpt.params.num_items()));
        }
        match distribution(m, s) {
            Ok(p) => {
                ptr::copy_nonoverlapping(p.as_ptr(), probs, p.len());
                AtmxStatus::Ok
            }
            Err(st) => st,
        }
    })
}

/// Top-`k` items, best first, ties to the smaller index. Writes
/// `min(k, num_items)` entries and their count to `*written`.
///
/// # Safety
/// `items` must hold `n` indices; `out_items` and `out_scores` must be valid
/// for `k` entries; `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atmx_recommend(
    model: *const AtmxModel,
    items: *const u32,
    n: usize,
    k: usize,
    out_items: *mut u32,
    out_scores: *mut f64,
    written: *mut usize,
) -> AtmxStatus {
    guard(|| {
        let (Some(m), false, false, false) =
            (model.as_ref(), out_items.is_null(), out_scores.is_null(), written.is_null())
        else {
            return fail(AtmxStatus::NullPointer, "null argument");
        };
        let s = match session(m, items, n) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match forward(s, &m.ckpt.params, m.ckpt.hyper()) {
            Ok(d) => {
                let top = d.top_k(k);
                for (j, (i, p)) in top.iter().enumerate() {
                    *out_items.add(j) = *i;
                    *out_scores.add(j) = *p;
                }
                *written = top.len();
                AtmxStatus::Ok
            }
            Err(e) => fail(AtmxStatus::Internal, e.to_string()),
        }
    })
}

/// HR@k and MRR@k of 1-based ranks.
///
/// # Safety
/// `ranks` must hold `n` values; `hr` and `mrr` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atmx_hr_mrr(ranks: *const usize, n: usize, k: usize, hr: *mut f64, mrr: *mut f64) -> AtmxStatus {
    guard(|| {
        if ranks.is_null() || hr.is_null() || mrr.is_null() {
            return fail(AtmxStatus::NullPointer, "null argument");
        }
        match hr_mrr(std::slice::from_raw_parts(ranks, n), k) {
            Ok((h, r)) => {
                *hr = h;
                *mrr = r;
                AtmxStatus::Ok
            }
            Err(e) => fail(AtmxStatus::InvalidArgument, e.to_string()),
        }
    })
}
