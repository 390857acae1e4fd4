//! C ABI over the factlab core: load a checkpoint behind an opaque
//! handle, generate greedily, score answers, and compute ROUGE-L. Every
//! fallible call returns a status code; the last error message is kept
//! per thread and fetched with `fl_last_error_message`.
//!
//! Ownership rules: strings returned by this library are freed with
//! `fl_string_free`; models are freed with `fl_model_free`; input
//! pointers must be valid NUL-terminated UTF-8 and are never retained.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use factlab::metrics;
use factlab::model::{checkpoint, ModelState};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).ok();
    });
}

/// Status codes returned by fallible calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    FlOk = 0,
    FlNullArgument = 1,
    FlInvalidUtf8 = 2,
    FlIoError = 3,
    FlContractViolation = 4,
    FlInternalError = 5,
}

/// Opaque model handle.
pub struct FlModel {
    inner: ModelState,
}

/// # Safety
/// `ptr` must be either null or a valid NUL-terminated C string.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, FlStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(FlStatus::FlNullArgument);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error("argument is not valid UTF-8");
            Err(FlStatus::FlInvalidUtf8)
        }
    }
}

fn to_c_string(s: String) -> *mut c_char {
    match CString::new(s) {
        Ok(c) => c.into_raw(),
        Err(_) => {
            set_error("output contained an interior NUL byte");
            std::ptr::null_mut()
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or null. Caller
/// frees the returned string with `fl_string_free`.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by a function in this library and not
/// freed before.
#[no_mangle]
pub unsafe extern "C" fn fl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Loads a model checkpoint. Returns null on failure (see
/// `fl_last_error_message`). Free with `fl_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn fl_model_load(path: *const c_char) -> *mut FlModel {
    let path = match unsafe { cstr(path) } {
        Ok(p) => p,
        Err(_) => return std::ptr::null_mut(),
    };
    match checkpoint::load(Path::new(path)) {
        Ok(inner) => Box::into_raw(Box::new(FlModel { inner })),
        Err(e) => {
            set_error(format!("checkpoint load failed: {e}"));
            std::ptr::null_mut()
        }
    }
}

/// Frees a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from `fl_model_load` and not been freed.
#[no_mangle]
pub unsafe extern "C" fn fl_model_free(model: *mut FlModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Context length of a loaded model, or 0 on null input.
///
/// # Safety
/// `model` must be a live handle from `fl_model_load` or null.
#[no_mangle]
pub unsafe extern "C" fn fl_model_context_len(model: *const FlModel) -> usize {
    match unsafe { model.as_ref() } {
        Some(m) => m.inner.config.context_len,
        None => 0,
    }
}

/// Greedy generation for a question. Returns a freshly allocated string
/// (free with `fl_string_free`) or null on failure.
///
/// # Safety
/// `model` must be a live handle; `question` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn fl_model_generate(
    model: *const FlModel,
    question: *const c_char,
    max_new_tokens: usize,
) -> *mut c_char {
    let Some(m) = (unsafe { model.as_ref() }) else {
        set_error("null model handle");
        return std::ptr::null_mut();
    };
    let q = match unsafe { cstr(question) } {
        Ok(q) => q,
        Err(_) => return std::ptr::null_mut(),
    };
    match m.inner.generate_greedy(q, max_new_tokens.max(1)) {
        Ok(text) => to_c_string(text),
        Err(e) => {
            set_error(format!("generation failed: {e}"));
            std::ptr::null_mut()
        }
    }
}

/// Geometric-mean per-token probability of `answer` given `question`,
/// written to `out`.
///
/// # Safety
/// `model` must be a live handle; `question`/`answer` valid C strings;
/// `out` a valid pointer to an f32.
#[no_mangle]
pub unsafe extern "C" fn fl_model_normalized_prob(
    model: *const FlModel,
    question: *const c_char,
    answer: *const c_char,
    out: *mut f32,
) -> FlStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        set_error("null model handle");
        return FlStatus::FlNullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return FlStatus::FlNullArgument;
    }
    let q = match unsafe { cstr(question) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    let a = match unsafe { cstr(answer) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    match metrics::normalized_prob(&m.inner, q, a) {
        Ok(p) => {
            unsafe { *out = p };
            FlStatus::FlOk
        }
        Err(e) => {
            set_error(format!("scoring failed: {e}"));
            FlStatus::FlContractViolation
        }
    }
}

/// ROUGE-L recall of `candidate` against `reference`, written to `out`.
///
/// # Safety
/// `candidate`/`reference` must be valid C strings; `out` a valid f32
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_rouge_l_recall(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f32,
) -> FlStatus {
    if out.is_null() {
        set_error("null output pointer");
        return FlStatus::FlNullArgument;
    }
    let c = match unsafe { cstr(candidate) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    let r = match unsafe { cstr(reference) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    match metrics::rouge_l_recall(c, r) {
        Ok(v) => {
            unsafe { *out = v };
            FlStatus::FlOk
        }
        Err(e) => {
            set_error(format!("rouge failed: {e}"));
            FlStatus::FlContractViolation
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use factlab::model::LmConfig;
    use std::ffi::CString;

    fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
        let model = ModelState::init(LmConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            context_len: 64,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let path = dir.join("model.bin");
        checkpoint::save(&model, &path).unwrap();
        path
    }

    #[test]
    fn load_generate_score_free_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_checkpoint(dir.path());
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        unsafe {
            let model = fl_model_load(c_path.as_ptr());
            assert!(!model.is_null());
            assert_eq!(fl_model_context_len(model), 64);

            let q = CString::new("what is this?").unwrap();
            let text = fl_model_generate(model, q.as_ptr(), 8);
            assert!(!text.is_null());
            let s = CStr::from_ptr(text).to_str().unwrap().to_string();
            // 8 byte-tokens decode to at most 8 chars (invalid byte runs
            // become replacement chars).
            assert!(s.chars().count() <= 8);
            fl_string_free(text);

            let a = CString::new("an answer").unwrap();
            let mut p = -1.0f32;
            let status = fl_model_normalized_prob(model, q.as_ptr(), a.as_ptr(), &mut p);
            assert_eq!(status, FlStatus::FlOk);
            assert!(p > 0.0 && p <= 1.0);

            fl_model_free(model);
        }
    }

    #[test]
    fn rouge_without_a_model() {
        let c = CString::new("the seas rise fast").unwrap();
        let r = CString::new("the seas rise").unwrap();
        let mut v = 0.0f32;
        let status = unsafe { fl_rouge_l_recall(c.as_ptr(), r.as_ptr(), &mut v) };
        assert_eq!(status, FlStatus::FlOk);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn null_and_error_paths_set_messages() {
        unsafe {
            let model = fl_model_load(std::ptr::null());
            assert!(model.is_null());
            let msg = fl_last_error_message();
            assert!(!msg.is_null());
            assert!(CStr::from_ptr(msg).to_str().unwrap().contains("null"));
            fl_string_free(msg);

            let bogus = CString::new("/nowhere/model.bin").unwrap();
            assert!(fl_model_load(bogus.as_ptr()).is_null());
            let msg = fl_last_error_message();
            assert!(CStr::from_ptr(msg)
                .to_str()
                .unwrap()
                .contains("checkpoint load failed"));
            fl_string_free(msg);

            let mut v = 0.0f32;
            let c = CString::new("x").unwrap();
            let status = fl_rouge_l_recall(c.as_ptr(), std::ptr::null(), &mut v);
            assert_eq!(status, FlStatus::FlNullArgument);

            // Empty reference violates the metric contract.
            let empty = CString::new("...").unwrap();
            let status = fl_rouge_l_recall(c.as_ptr(), empty.as_ptr(), &mut v);
            assert_eq!(status, FlStatus::FlContractViolation);

            fl_model_free(std::ptr::null_mut());
            fl_string_free(std::ptr::null_mut());
        }
    }
}
