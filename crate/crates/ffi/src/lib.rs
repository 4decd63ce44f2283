//! C interface to the s2r engine.
//!
//! Every function returns an [`S2rStatus`]. On failure the message is
//! available from [`s2r_last_error`] on the same thread. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`s2r_string_free`]; engines are released with [`s2r_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use s2r_core::cli::{CliError, Engine};
use s2r_core::dataset::make_proxy_skeleton;
use s2r_core::eval::dist_n;
use s2r_core::text::{jaccard, join, tokenize, StopList};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2rStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// the configuration file is unreadable or invalid
    Config = 4,
    /// a work-directory artifact (index, checkpoint) is missing
    MissingArtifact = 5,
    Runtime = 6,
    /// no indexed query shares a token with the input
    NoMatch = 7,
    Panic = 8,
}

/// Opaque engine handle.
pub struct S2rEngine {
    inner: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(S2rStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Config(_) => S2rStatus::Config,
            CliError::Missing(_) => S2rStatus::MissingArtifact,
            CliError::Run(_) => S2rStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> S2rStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            S2rStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            S2rStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(S2rStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(S2rStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(S2rStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior NULs replaced").into_raw()
}

/// Loads the engine described by a TOML run configuration whose work
/// directory already holds an index and trained checkpoints.
///
/// # Safety
/// `config_path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2r_engine_open(config_path: *const c_char, out: *mut *mut S2rEngine) -> S2rStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = text(config_path, "config_path")?;
        let inner = Engine::from_config_file(Path::new(path))?;
        *out = Box::into_raw(Box::new(S2rEngine { inner }));
        Ok(())
    })
}

/// Generates a response to `query`. On success `*out_json` receives a JSON
/// object with the fields `q`, `rq`, `rr`, `skeleton`, `m`, `response`,
/// `logprob`, `normalized`, `gate_mean` and `similarity`.
///
/// # Safety
/// `engine` comes from [`s2r_engine_open`]; `query` is a NUL-terminated
/// string; `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2r_engine_respond(
    engine: *const S2rEngine,
    query: *const c_char,
    out_json: *mut *mut c_char,
) -> S2rStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let engine = engine.as_ref().ok_or_else(|| Failure(S2rStatus::NullArgument, "engine is null".into()))?;
        let q = text(query, "query")?;
        let rec = engine
            .inner
            .respond(q)?
            .ok_or_else(|| Failure(S2rStatus::NoMatch, "no similar query in the index".into()))?;
        *out_json = c_string(serde_json::to_string(&rec).expect("record serializes"));
        Ok(())
    })
}

/// # Safety
/// `engine` is null or comes from [`s2r_engine_open`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn s2r_engine_free(engine: *mut S2rEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `s` is null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn s2r_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn s2r_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Jaccard similarity of the token sets of two whitespace-tokenized strings.
///
/// # Safety
/// `a` and `b` are NUL-terminated strings; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2r_jaccard(a: *const c_char, b: *const c_char, out: *mut f64) -> S2rStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let a = tokenize(text(a, "a")?, false);
        let b = tokenize(text(b, "b")?, false);
        *out = jaccard(&a, &b);
        Ok(())
    })
}

/// Distinct n-grams over total tokens for `count` whitespace-tokenized responses.
///
/// # Safety
/// `responses` points to `count` NUL-terminated strings; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2r_dist_n(
    responses: *const *const c_char,
    count: usize,
    n: usize,
    out: *mut f64,
) -> S2rStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if responses.is_null() && count > 0 {
            return Err(Failure(S2rStatus::NullArgument, "responses is null".into()));
        }
        let mut seqs = Vec::with_capacity(count);
        for i in 0..count {
            seqs.push(tokenize(text(*responses.add(i), "response")?, false));
        }
        *out = dist_n(&seqs, n).map_err(|e| Failure(S2rStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Proxy skeleton of a retrieved response `rr` against the gold response `r`.
/// `stopwords` is a whitespace-separated list (may be empty). On success
/// `*out_json` receives `{"m": [0|1, ...], "t": "<skeleton tokens>"}`.
///
/// # Safety
/// All strings are NUL-terminated; `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2r_proxy_skeleton(
    r: *const c_char,
    rr: *const c_char,
    stopwords: *const c_char,
    out_json: *mut *mut c_char,
) -> S2rStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let r = tokenize(text(r, "r")?, false);
        let rr = tokenize(text(rr, "rr")?, false);
        let stop = StopList::new(tokenize(text(stopwords, "stopwords")?, false));
        let p = make_proxy_skeleton(&r, &rr, &stop);
        let json = serde_json::json!({ "m": p.labels, "t": join(&p.skeleton) });
        *out_json = c_string(json.to_string());
        Ok(())
    })
}
