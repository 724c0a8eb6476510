//! C ABI over `coder-core`.
//!
//! Conventions:
//! - every fallible function returns a [`CoderStatus`]; results go through out-pointers;
//! - handles are opaque and owned by the caller, released with the matching `_free`;
//! - on failure, [`coder_last_error`] copies a message for the calling thread;
//! - panics never cross the boundary and surface as `CODER_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use coder_core::checkpoint::load_encoder;
use coder_core::corpus_io::{tokenize, Vocab};
use coder_core::embed_store::{open_embeddings, EmbeddingStore};
use coder_core::encoder::EncoderParams;
use coder_core::first_stage::dense_search;
use coder_core::metrics::paired_t_test;
use coder_core::ranker::{listnet_loss, rerank, TargetLabels};
use coder_core::Error;

/// Result codes shared by every entry point.
#[allow(non_camel_case_types)]
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoderStatus {
    CODER_OK = 0,
    /// A required pointer argument was null.
    CODER_NULL_ARGUMENT = 1,
    CODER_IO = 2,
    /// Malformed or corrupt file contents.
    CODER_FORMAT = 3,
    /// Inputs violate a precondition (shapes, ranges, values).
    CODER_INVALID = 4,
    /// A caller-provided buffer is too small.
    CODER_BUFFER_TOO_SMALL = 5,
    CODER_PANIC = 6,
}

/// Frozen document embeddings opened from a `CDRE` file.
pub struct CoderEmbeddings(EmbeddingStore);

/// Query encoder loaded from a `CDRQ` checkpoint.
pub struct CoderEncoder(EncoderParams);

/// Token vocabulary loaded from a vocab TSV.
pub struct CoderVocab(Vocab);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> CoderStatus {
    match e {
        Error::Io { .. } => CoderStatus::CODER_IO,
        Error::Format(_) | Error::Truncated { .. } | Error::Parse { .. } => {
            CoderStatus::CODER_FORMAT
        }
        _ => CoderStatus::CODER_INVALID,
    }
}

struct Fail(CoderStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CoderStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CoderStatus::CODER_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside coder");
            CoderStatus::CODER_PANIC
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(
        CoderStatus::CODER_NULL_ARGUMENT,
        format!("`{name}` is null"),
    )
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(CoderStatus::CODER_INVALID, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

fn too_small(need: usize, have: usize) -> Fail {
    Fail(
        CoderStatus::CODER_BUFFER_TOO_SMALL,
        format!("buffer holds {have} values, {need} needed"),
    )
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coder_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated, truncated to
/// `cap`) into `buf` and returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn coder_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Opens a `CDRE` embedding file (memory-mapped).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coder_embeddings_open(
    path: *const c_char,
    out: *mut *mut CoderEmbeddings,
) -> CoderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let store = open_embeddings(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(CoderEmbeddings(store)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`coder_embeddings_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coder_embeddings_free(h: *mut CoderEmbeddings) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h`, `dim` and `count` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn coder_embeddings_shape(
    h: *const CoderEmbeddings,
    dim: *mut usize,
    count: *mut usize,
) -> CoderStatus {
    guard(|| {
        let s = &handle(h, "embeddings")?.0;
        if dim.is_null() || count.is_null() {
            return Err(null("dim/count"));
        }
        *dim = s.dim();
        *count = s.count();
        Ok(())
    })
}

/// Copies row `index` into `out` (`cap` floats, at least `dim`).
///
/// # Safety
/// `out` must point to `cap` writable floats.
#[no_mangle]
pub unsafe extern "C" fn coder_embeddings_row(
    h: *const CoderEmbeddings,
    index: usize,
    out: *mut f32,
    cap: usize,
) -> CoderStatus {
    guard(|| {
        let s = &handle(h, "embeddings")?.0;
        let row = s.row(index)?;
        if cap < row.len() {
            return Err(too_small(row.len(), cap));
        }
        slice_mut_arg(out, row.len(), "out")?.copy_from_slice(row);
        Ok(())
    })
}

/// Loads a query encoder checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coder_encoder_load(
    path: *const c_char,
    out: *mut *mut CoderEncoder,
) -> CoderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = load_encoder(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(CoderEncoder(params)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`coder_encoder_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coder_encoder_free(h: *mut CoderEncoder) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Output dimension of the encoder, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn coder_encoder_out_dim(h: *const CoderEncoder) -> usize {
    h.as_ref().map_or(0, |e| e.0.out_dim())
}

/// Encodes token ids (deterministic, no dropout) into `out` (`cap` ≥ out_dim).
///
/// # Safety
/// `tokens` must hold `n_tokens` ids; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn coder_encoder_encode(
    h: *const CoderEncoder,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
    cap: usize,
) -> CoderStatus {
    guard(|| {
        let enc = &handle(h, "encoder")?.0;
        let q = enc.encode_eval(slice_arg(tokens, n_tokens, "tokens")?)?;
        if cap < q.len() {
            return Err(too_small(q.len(), cap));
        }
        slice_mut_arg(out, q.len(), "out")?.copy_from_slice(&q);
        Ok(())
    })
}

/// Encodes `tokens`, scores `candidates` against the store and writes them
/// best-first into `out_ids` / `out_scores` (each `n_candidates` long).
///
/// # Safety
/// All array arguments must hold `n_tokens` / `n_candidates` elements.
#[no_mangle]
pub unsafe extern "C" fn coder_rerank(
    enc: *const CoderEncoder,
    store: *const CoderEmbeddings,
    tokens: *const u32,
    n_tokens: usize,
    candidates: *const usize,
    n_candidates: usize,
    out_ids: *mut usize,
    out_scores: *mut f64,
) -> CoderStatus {
    guard(|| {
        let enc = &handle(enc, "encoder")?.0;
        let store = &handle(store, "embeddings")?.0;
        let q = enc.encode_eval(slice_arg(tokens, n_tokens, "tokens")?)?;
        let ranked = rerank(
            &q,
            slice_arg(candidates, n_candidates, "candidates")?,
            store,
        )?;
        let ids = slice_mut_arg(out_ids, n_candidates, "out_ids")?;
        let scores = slice_mut_arg(out_scores, n_candidates, "out_scores")?;
        for (i, (d, s)) in ranked.into_iter().enumerate() {
            ids[i] = d;
            scores[i] = s;
        }
        Ok(())
    })
}

/// Exact top-`k` inner-product search with a query vector of length `dim`.
/// Writes `min(k, count)` hits and stores that number in `n_out`.
///
/// # Safety
/// `query` holds `dim` doubles; `out_ids` / `out_scores` hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn coder_dense_search(
    store: *const CoderEmbeddings,
    query: *const f64,
    dim: usize,
    k: usize,
    out_ids: *mut usize,
    out_scores: *mut f64,
    n_out: *mut usize,
) -> CoderStatus {
    guard(|| {
        let store = &handle(store, "embeddings")?.0;
        if n_out.is_null() {
            return Err(null("n_out"));
        }
        let hits = dense_search(store, slice_arg(query, dim, "query")?, k)?;
        let ids = slice_mut_arg(out_ids, hits.len(), "out_ids")?;
        let scores = slice_mut_arg(out_scores, hits.len(), "out_scores")?;
        for (i, (d, s)) in hits.iter().enumerate() {
            ids[i] = *d;
            scores[i] = *s;
        }
        *n_out = hits.len();
        Ok(())
    })
}

/// Loads a vocabulary TSV.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coder_vocab_load(
    path: *const c_char,
    out: *mut *mut CoderVocab,
) -> CoderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = Vocab::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(CoderVocab(v)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`coder_vocab_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coder_vocab_free(h: *mut CoderVocab) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Tokenizes `text` (BOS + word ids, at most `max_len`) into `out`.
/// `n_out` receives the sequence length even when `cap` is too small.
///
/// # Safety
/// `text` must be NUL-terminated; `out` holds `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn coder_tokenize(
    vocab: *const CoderVocab,
    text: *const c_char,
    max_len: usize,
    out: *mut u32,
    cap: usize,
    n_out: *mut usize,
) -> CoderStatus {
    guard(|| {
        let v = &handle(vocab, "vocab")?.0;
        if n_out.is_null() {
            return Err(null("n_out"));
        }
        let ids = tokenize(&path_arg(text, "text")?, v, max_len);
        *n_out = ids.len();
        if cap < ids.len() {
            return Err(too_small(ids.len(), cap));
        }
        slice_mut_arg(out, ids.len(), "out")?.copy_from_slice(&ids);
        Ok(())
    })
}

/// List-wise KL loss. `labels` holds grades for positives and `-INFINITY`
/// elsewhere; `grad` (optional, length `n`) receives d loss / d score.
///
/// # Safety
/// `scores` and `labels` hold `n` doubles; `loss` is writable; `grad` is null or holds `n`.
#[no_mangle]
pub unsafe extern "C" fn coder_listnet_loss(
    scores: *const f64,
    labels: *const f64,
    n: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> CoderStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        let y = TargetLabels::new(slice_arg(labels, n, "labels")?.to_vec())?;
        let (l, g) = listnet_loss(slice_arg(scores, n, "scores")?, &y)?;
        *loss = l;
        if !grad.is_null() {
            slice::from_raw_parts_mut(grad, n).copy_from_slice(&g);
        }
        Ok(())
    })
}

/// Two-sided paired t-test on `n` aligned values.
///
/// # Safety
/// `a` and `b` hold `n` doubles; `t` and `p` are writable.
#[no_mangle]
pub unsafe extern "C" fn coder_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    t: *mut f64,
    p: *mut f64,
) -> CoderStatus {
    guard(|| {
        if t.is_null() || p.is_null() {
            return Err(null("t/p"));
        }
        let r = paired_t_test(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        *t = r.t;
        *p = r.p;
        Ok(())
    })
}
