//! C ABI over the deterministic kernel: the document store, BM25 retrieval,
//! text chunking, the headline metrics, and the paired t-test.
//!
//! Conventions:
//! - Handles (`PdxStore`, `PdxBm25`) are opaque; create and free them only
//!   through these functions, and never share one across threads without
//!   external synchronization.
//! - Functions returning `PdxStatus` report failure details through
//!   `pdx_last_error`, whose buffer is thread-local and valid until the next
//!   failing call on the same thread.
//! - Strings returned as `char*` are owned by the caller and must be
//!   released with `pdx_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use paradox::corpus::{chunk_text, ingest_corpus, Store};
use paradox::error::Error;
use paradox::eval::stats::ttest_from_diffs;
use paradox::eval::{accuracy_from_flags, asr_from_counts, ndcg_from_flags, selection_rate_from_counts};
use paradox::retrieval::{build_bm25_index, Bm25Index, Bm25Params, SearchIndex};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdxStatus {
    /// Success.
    Ok = 0,
    /// An argument was null, empty, or out of range.
    InvalidInput = 1,
    /// A referenced document or file does not exist.
    NotFound = 2,
    /// A duplicate id collided with existing state.
    Conflict = 3,
    /// A file failed to parse.
    Parse = 4,
    /// A string argument was not valid UTF-8.
    Utf8 = 5,
    /// The requested value is mathematically undefined for this input.
    Undefined = 6,
    /// Any other failure; see pdx_last_error.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|b| *b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: PdxStatus, msg: &str) -> PdxStatus {
    set_last_error(msg);
    status
}

fn status_of(err: &Error) -> PdxStatus {
    match err {
        Error::InvalidInput(_) => PdxStatus::InvalidInput,
        Error::NotFound(_) => PdxStatus::NotFound,
        Error::Conflict(_) => PdxStatus::Conflict,
        Error::Parse { .. } => PdxStatus::Parse,
        _ => PdxStatus::Internal,
    }
}

fn fail_err(err: &Error) -> PdxStatus {
    fail(status_of(err), &err.to_string())
}

/// Message of the most recent failure on this thread, empty when none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pdx_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Reads a required UTF-8 string argument.
unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, PdxStatus> {
    if ptr.is_null() {
        return Err(fail(PdxStatus::InvalidInput, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(PdxStatus::Utf8, &format!("{name} is not valid UTF-8")))
}

/// Reads a required slice argument; a null base pointer is allowed only for
/// an empty slice.
unsafe fn read_slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], PdxStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(PdxStatus::InvalidInput, &format!("{name} is null with len {len}")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn owned_c_string(s: String) -> *mut c_char {
    match CString::new(s) {
        Ok(c) => c.into_raw(),
        Err(_) => {
            set_last_error("output contained an interior NUL byte");
            ptr::null_mut()
        }
    }
}

/// Releases a string returned by this library. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pdx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Document store
// ---------------------------------------------------------------------------

/// Opaque document store handle.
pub struct PdxStore {
    inner: Store,
}

/// Creates an empty document store. Free with pdx_store_free.
#[no_mangle]
pub extern "C" fn pdx_store_new() -> *mut PdxStore {
    Box::into_raw(Box::new(PdxStore { inner: Store::new() }))
}

/// Frees a store. Null is a no-op. Indexes built from the store stay valid;
/// they hold their own copy of the corpus statistics.
#[no_mangle]
pub unsafe extern "C" fn pdx_store_free(store: *mut PdxStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Adds one clean document. Duplicate ids are conflicts.
#[no_mangle]
pub unsafe extern "C" fn pdx_store_add_doc(
    store: *mut PdxStore,
    doc_id: *const c_char,
    text: *const c_char,
) -> PdxStatus {
    let Some(store) = store.as_mut() else {
        return fail(PdxStatus::InvalidInput, "store is null");
    };
    let doc_id = match read_str(doc_id, "doc_id") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let text = match read_str(text, "text") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match store.inner.add_clean(doc_id, text) {
        Ok(()) => PdxStatus::Ok,
        Err(e) => fail_err(&e),
    }
}

/// Appends every document of a corpus JSONL file as a clean document.
#[no_mangle]
pub unsafe extern "C" fn pdx_store_load_jsonl(
    store: *mut PdxStore,
    path: *const c_char,
) -> PdxStatus {
    let Some(store) = store.as_mut() else {
        return fail(PdxStatus::InvalidInput, "store is null");
    };
    let path = match read_str(path, "path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let loaded = match ingest_corpus(Path::new(path)) {
        Ok(s) => s,
        Err(e) => return fail_err(&e),
    };
    for doc in loaded.docs() {
        if let Err(e) = store.inner.add_clean(&doc.doc_id, &doc.text) {
            return fail_err(&e);
        }
    }
    PdxStatus::Ok
}

/// Number of documents in the store; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pdx_store_len(store: *const PdxStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.len())
}

// ---------------------------------------------------------------------------
// BM25
// ---------------------------------------------------------------------------

/// Opaque BM25 index handle. The index snapshots the store at build time.
pub struct PdxBm25 {
    inner: Bm25Index,
}

/// Builds a BM25 index over the store's current contents. Returns null on
/// failure (empty store, k1 <= 0, b outside [0, 1]); see pdx_last_error.
#[no_mangle]
pub unsafe extern "C" fn pdx_bm25_build(
    store: *const PdxStore,
    k1: f64,
    b: f64,
) -> *mut PdxBm25 {
    let Some(store) = store.as_ref() else {
        fail(PdxStatus::InvalidInput, "store is null");
        return ptr::null_mut();
    };
    if !(k1 > 0.0) {
        fail(PdxStatus::InvalidInput, "k1 must be positive");
        return ptr::null_mut();
    }
    if !(0.0..=1.0).contains(&b) {
        fail(PdxStatus::InvalidInput, "b must lie in [0, 1]");
        return ptr::null_mut();
    }
    match build_bm25_index(&store.inner, Bm25Params { k1, b }) {
        Ok(index) => Box::into_raw(Box::new(PdxBm25 { inner: index })),
        Err(e) => {
            fail_err(&e);
            ptr::null_mut()
        }
    }
}

/// Frees a BM25 index. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pdx_bm25_free(index: *mut PdxBm25) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// BM25 score of one document for a query, written to `out`.
#[no_mangle]
pub unsafe extern "C" fn pdx_bm25_score(
    index: *const PdxBm25,
    query: *const c_char,
    doc_id: *const c_char,
    out: *mut f64,
) -> PdxStatus {
    let Some(index) = index.as_ref() else {
        return fail(PdxStatus::InvalidInput, "index is null");
    };
    if out.is_null() {
        return fail(PdxStatus::InvalidInput, "out is null");
    }
    let query = match read_str(query, "query") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let doc_id = match read_str(doc_id, "doc_id") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match index.inner.score(query, doc_id) {
        Ok(score) => {
            *out = score;
            PdxStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Top-k retrieval as a JSON array `[{"doc_id": ..., "score": ...}, ...]` in
/// rank order. Returns null on failure; free the string with pdx_string_free.
#[no_mangle]
pub unsafe extern "C" fn pdx_bm25_retrieve_json(
    index: *const PdxBm25,
    query: *const c_char,
    k: usize,
) -> *mut c_char {
    let Some(index) = index.as_ref() else {
        fail(PdxStatus::InvalidInput, "index is null");
        return ptr::null_mut();
    };
    let query = match read_str(query, "query") {
        Ok(s) => s,
        Err(_) => return ptr::null_mut(),
    };
    match index.inner.retrieve(query, k) {
        Ok(ranked) => match serde_json::to_string(&ranked) {
            Ok(body) => owned_c_string(body),
            Err(e) => {
                fail(PdxStatus::Internal, &format!("serialize ranking: {e}"));
                ptr::null_mut()
            }
        },
        Err(e) => {
            fail_err(&e);
            ptr::null_mut()
        }
    }
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// Splits text into token windows of `max_tokens` overlapping by `overlap`,
/// returned as a JSON array of strings. Returns null on failure (zero
/// max_tokens, overlap >= max_tokens); free with pdx_string_free.
#[no_mangle]
pub unsafe extern "C" fn pdx_chunk_text_json(
    text: *const c_char,
    max_tokens: usize,
    overlap: usize,
) -> *mut c_char {
    let text = match read_str(text, "text") {
        Ok(s) => s,
        Err(_) => return ptr::null_mut(),
    };
    match chunk_text(text, max_tokens, overlap) {
        Ok(chunks) => match serde_json::to_string(&chunks) {
            Ok(body) => owned_c_string(body),
            Err(e) => {
                fail(PdxStatus::Internal, &format!("serialize chunks: {e}"));
                ptr::null_mut()
            }
        },
        Err(e) => {
            fail_err(&e);
            ptr::null_mut()
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Fraction of nonzero flags in `correct`. An empty series scores 0.
#[no_mangle]
pub unsafe extern "C" fn pdx_accuracy(
    correct: *const u8,
    len: usize,
    out: *mut f64,
) -> PdxStatus {
    if out.is_null() {
        return fail(PdxStatus::InvalidInput, "out is null");
    }
    let correct = match read_slice(correct, len, "correct") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let flags: Vec<bool> = correct.iter().map(|c| *c != 0).collect();
    *out = accuracy_from_flags(&flags);
    PdxStatus::Ok
}

/// Attack success rate over parallel series: per-query poison-docs-retrieved
/// counts and correctness flags. An empty series scores 0.
#[no_mangle]
pub unsafe extern "C" fn pdx_asr(
    poisoned_retrieved: *const usize,
    correct: *const u8,
    len: usize,
    out: *mut f64,
) -> PdxStatus {
    if out.is_null() {
        return fail(PdxStatus::InvalidInput, "out is null");
    }
    let counts = match read_slice(poisoned_retrieved, len, "poisoned_retrieved") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let correct = match read_slice(correct, len, "correct") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let flags: Vec<bool> = correct.iter().map(|c| *c != 0).collect();
    match asr_from_counts(counts, &flags) {
        Ok(v) => {
            *out = v;
            PdxStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}

/// Mean poison-docs-retrieved count. An empty series scores 0.
#[no_mangle]
pub unsafe extern "C" fn pdx_selection_rate(
    poisoned_retrieved: *const usize,
    len: usize,
    out: *mut f64,
) -> PdxStatus {
    if out.is_null() {
        return fail(PdxStatus::InvalidInput, "out is null");
    }
    let counts = match read_slice(poisoned_retrieved, len, "poisoned_retrieved") {
        Ok(s) => s,
        Err(status) => return status,
    };
    *out = selection_rate_from_counts(counts);
    PdxStatus::Ok
}

/// NDCG@k for one ranking. `poisoned_in_rank` holds 0/1 flags in rank order;
/// `n_poison_docs` is how many poison documents exist for the query. Returns
/// PDX_STATUS_UNDEFINED (leaving `out` untouched) when no poison documents
/// exist or k is zero.
#[no_mangle]
pub unsafe extern "C" fn pdx_ndcg_at_k(
    poisoned_in_rank: *const u8,
    len: usize,
    n_poison_docs: usize,
    k: usize,
    out: *mut f64,
) -> PdxStatus {
    if out.is_null() {
        return fail(PdxStatus::InvalidInput, "out is null");
    }
    let ranks = match read_slice(poisoned_in_rank, len, "poisoned_in_rank") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let flags: Vec<bool> = ranks.iter().map(|f| *f != 0).collect();
    match ndcg_from_flags(&flags, n_poison_docs, k) {
        Some(v) => {
            *out = v;
            PdxStatus::Ok
        }
        None => fail(
            PdxStatus::Undefined,
            "ndcg is undefined: no poison documents exist for this query (or k is 0)",
        ),
    }
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

/// Paired t-test summary. When `degenerate` is nonzero the differences had
/// zero variance: `t_stat` is NaN and the p-value is 0 or 1 by inspection.
#[repr(C)]
pub struct PdxPairedStats {
    pub n: usize,
    pub df: usize,
    pub mean_diff: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub degenerate: u8,
}

/// Two-sided paired t-test on the differences `a[i] - b[i]`. Needs at least
/// two pairs.
#[no_mangle]
pub unsafe extern "C" fn pdx_paired_ttest(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut PdxPairedStats,
) -> PdxStatus {
    let Some(out) = out.as_mut() else {
        return fail(PdxStatus::InvalidInput, "out is null");
    };
    let a = match read_slice(a, len, "a") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let b = match read_slice(b, len, "b") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    match ttest_from_diffs(&diffs) {
        Ok(stats) => {
            out.n = stats.n;
            out.df = stats.df;
            out.mean_diff = stats.mean_diff;
            out.std_error = stats.std_error;
            out.t_stat = stats.t_stat.unwrap_or(f64::NAN);
            out.p_value = stats.p_value;
            out.ci_low = stats.ci95.0;
            out.ci_high = stats.ci95.1;
            out.degenerate = stats.degenerate as u8;
            PdxStatus::Ok
        }
        Err(e) => fail_err(&e),
    }
}
