//! C ABI for the c3 library: context keys, credit extraction, the pass@k
//! estimator, policy tables behind an opaque handle, and full experiment runs.
//!
//! Conventions:
//! - Every fallible function returns a [`C3Status`] code; `C3_STATUS_OK` is 0.
//! - Outputs go through caller-provided pointers.
//! - Handles are opaque; free them with their paired `_free` function.
//! - On failure, a thread-local message is readable via
//!   [`c3_last_error_message`].

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::c_char;
use std::path::Path;

use c3_core::credit::{c3_credit, full_sample_credit};
use c3_core::diagnostics::pass_at_k;
use c3_core::harness::{run, Method, RunConfig};
use c3_core::policy::PolicyTable;
use c3_core::protocol::context_key;
use c3_core::rng::{StreamLabel, StreamPurpose};

/// Status codes returned by every fallible entry point.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum C3Status {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    Utf8 = -3,
    Io = -4,
    RunFailed = -5,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|cell| *cell.borrow_mut() = message.into());
}

fn fail(status: C3Status, message: impl Into<String>) -> C3Status {
    set_error(message);
    status
}

/// Copies the last error message on this thread into `buffer` (NUL
/// terminated, truncated to `capacity`). Returns the full message length in
/// bytes, or 0 when there is none.
///
/// # Safety
/// `buffer` must point to at least `capacity` writable bytes, or be null
/// (then only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn c3_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|cell| {
        let message = cell.borrow();
        if !buffer.is_null() && capacity > 0 {
            let bytes = message.as_bytes();
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        message.len()
    })
}

/// Computes the deterministic context key of a UTF-8 context string:
/// the 63-bit primary key plus the auxiliary fingerprints.
///
/// # Safety
/// `text` must point to `text_len` readable bytes; the three output pointers
/// must be writable or null (null outputs are skipped).
#[no_mangle]
pub unsafe extern "C" fn c3_context_key(
    text: *const u8,
    text_len: usize,
    out_kappa: *mut u64,
    out_char_length: *mut u64,
    out_secondary_digest: *mut u64,
) -> C3Status {
    if text.is_null() {
        return fail(C3Status::NullPointer, "text is null");
    }
    let bytes = std::slice::from_raw_parts(text, text_len);
    let Ok(text) = std::str::from_utf8(bytes) else {
        return fail(C3Status::Utf8, "context text is not valid UTF-8");
    };
    let key = context_key(text);
    if !out_kappa.is_null() {
        *out_kappa = key.kappa;
    }
    if !out_char_length.is_null() {
        *out_char_length = key.char_length;
    }
    if !out_secondary_digest.is_null() {
        *out_secondary_digest = key.secondary_digest;
    }
    C3Status::Ok
}

/// Unbiased pass@k estimate for `c` successes out of `n` samples.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn c3_pass_at_k(n: u64, c: u64, k: u64, out: *mut f64) -> C3Status {
    if out.is_null() {
        return fail(C3Status::NullPointer, "out is null");
    }
    match pass_at_k(n, c, k) {
        Ok(value) => {
            *out = value;
            C3Status::Ok
        }
        Err(e) => fail(C3Status::InvalidArgument, e.to_string()),
    }
}

unsafe fn credit_common(
    means: *const f64,
    counts: *const u64,
    len: usize,
    out_advantages: *mut f64,
    loo: bool,
) -> C3Status {
    if means.is_null() || counts.is_null() || out_advantages.is_null() {
        return fail(C3Status::NullPointer, "means, counts, and out must be non-null");
    }
    let means = std::slice::from_raw_parts(means, len);
    let counts: Vec<usize> = std::slice::from_raw_parts(counts, len)
        .iter()
        .map(|&c| c as usize)
        .collect();
    let result = if loo {
        c3_credit(means, &counts)
    } else {
        full_sample_credit(means, &counts)
    };
    match result {
        Ok(advantages) => {
            std::ptr::copy_nonoverlapping(advantages.as_ptr(), out_advantages, len);
            C3Status::Ok
        }
        Err(e) => fail(C3Status::InvalidArgument, e.to_string()),
    }
}

/// Leave-one-out contextual credit: `out_advantages[j] = mean_j - b_{-j}`
/// over one bucket's per-candidate replay means and counts.
///
/// # Safety
/// `means`, `counts`, and `out_advantages` must each point to `len` readable
/// (respectively writable) elements.
#[no_mangle]
pub unsafe extern "C" fn c3_credit_loo(
    means: *const f64,
    counts: *const u64,
    len: usize,
    out_advantages: *mut f64,
) -> C3Status {
    credit_common(means, counts, len, out_advantages, true)
}

/// Coupled full-sample credit (the no-LOO ablation baseline).
///
/// # Safety
/// Same contracts as [`c3_credit_loo`].
#[no_mangle]
pub unsafe extern "C" fn c3_credit_full_sample(
    means: *const f64,
    counts: *const u64,
    len: usize,
    out_advantages: *mut f64,
) -> C3Status {
    credit_common(means, counts, len, out_advantages, false)
}

/// Opaque tabular softmax policy handle.
pub struct C3Policy {
    table: PolicyTable,
}

/// Creates a policy over `role_count` roles with the given per-role macro-
/// action vocabulary sizes. Returns null on invalid input.
///
/// # Safety
/// `role_vocabs` must point to `role_count` readable elements.
#[no_mangle]
pub unsafe extern "C" fn c3_policy_new(
    role_vocabs: *const u64,
    role_count: usize,
) -> *mut C3Policy {
    if role_vocabs.is_null() || role_count == 0 {
        set_error("role_vocabs must be non-null and nonempty");
        return std::ptr::null_mut();
    }
    let vocabs: Vec<usize> = std::slice::from_raw_parts(role_vocabs, role_count)
        .iter()
        .map(|&v| v as usize)
        .collect();
    if vocabs.contains(&0) {
        set_error("every role needs a nonempty vocabulary");
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(C3Policy {
        table: PolicyTable::new(vocabs),
    }))
}

/// Releases a policy handle. Null is ignored.
///
/// # Safety
/// `policy` must be a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn c3_policy_free(policy: *mut C3Policy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

unsafe fn policy_and_key<'a>(
    policy: *mut C3Policy,
    context: *const u8,
    context_len: usize,
) -> Result<(&'a mut C3Policy, c3_core::protocol::ContextKey), C3Status> {
    if policy.is_null() || context.is_null() {
        set_error("policy and context must be non-null");
        return Err(C3Status::NullPointer);
    }
    let bytes = std::slice::from_raw_parts(context, context_len);
    let Ok(text) = std::str::from_utf8(bytes) else {
        set_error("context is not valid UTF-8");
        return Err(C3Status::Utf8);
    };
    Ok((&mut *policy, context_key(text)))
}

/// Exact log-probability of `token` for `role` at the context string.
/// Unseen contexts are uniform.
///
/// # Safety
/// `policy` must be a live handle; `context` must point to `context_len`
/// readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c3_policy_log_prob(
    policy: *mut C3Policy,
    role: usize,
    context: *const u8,
    context_len: usize,
    token: u32,
    out: *mut f64,
) -> C3Status {
    let (handle, key) = match policy_and_key(policy, context, context_len) {
        Ok(v) => v,
        Err(status) => return status,
    };
    if out.is_null() {
        return fail(C3Status::NullPointer, "out is null");
    }
    if role >= handle.table.role_vocabs().len()
        || token as usize >= handle.table.role_vocab(role)
    {
        return fail(C3Status::InvalidArgument, "role or token out of range");
    }
    *out = handle.table.log_prob(role, &key, token);
    C3Status::Ok
}

/// Samples one token for `role` at the context string from the named
/// deterministic stream `(seed, stream_index)`.
///
/// # Safety
/// Same contracts as [`c3_policy_log_prob`].
#[no_mangle]
pub unsafe extern "C" fn c3_policy_sample(
    policy: *mut C3Policy,
    role: usize,
    context: *const u8,
    context_len: usize,
    seed: u64,
    stream_index: u64,
    out_token: *mut u32,
) -> C3Status {
    let (handle, key) = match policy_and_key(policy, context, context_len) {
        Ok(v) => v,
        Err(status) => return status,
    };
    if out_token.is_null() {
        return fail(C3Status::NullPointer, "out_token is null");
    }
    if role >= handle.table.role_vocabs().len() {
        return fail(C3Status::InvalidArgument, "role out of range");
    }
    let mut stream = StreamLabel::new(seed, StreamPurpose::Rollout, stream_index).stream();
    *out_token = handle.table.sample_action(role, &key, &mut stream);
    C3Status::Ok
}

/// Writes the policy to the line-oriented checkpoint format.
///
/// # Safety
/// `policy` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c3_policy_save(policy: *mut C3Policy, path: *const c_char) -> C3Status {
    if policy.is_null() || path.is_null() {
        return fail(C3Status::NullPointer, "policy and path must be non-null");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(C3Status::Utf8, "path is not valid UTF-8");
    };
    match (*policy).table.save(Path::new(path)) {
        Ok(()) => C3Status::Ok,
        Err(e) => fail(C3Status::Io, e.to_string()),
    }
}

/// Loads a checkpoint written by [`c3_policy_save`] into a fresh handle with
/// the given role vocabularies. Returns null on failure.
///
/// # Safety
/// `role_vocabs` must point to `role_count` readable elements; `path` must be
/// a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c3_policy_load(
    role_vocabs: *const u64,
    role_count: usize,
    path: *const c_char,
) -> *mut C3Policy {
    if role_vocabs.is_null() || path.is_null() || role_count == 0 {
        set_error("role_vocabs and path must be non-null");
        return std::ptr::null_mut();
    }
    let vocabs: Vec<usize> = std::slice::from_raw_parts(role_vocabs, role_count)
        .iter()
        .map(|&v| v as usize)
        .collect();
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error("path is not valid UTF-8");
        return std::ptr::null_mut();
    };
    match PolicyTable::load(vocabs, Path::new(path)) {
        Ok(table) => Box::into_raw(Box::new(C3Policy { table })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Runs a full experiment from a TOML config file, writing result files under
/// `out_dir`. `method` optionally overrides the config's method by name.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings; `method` must
/// be a NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn c3_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    method: *const c_char,
    workers: usize,
) -> C3Status {
    if config_path.is_null() || out_dir.is_null() {
        return fail(C3Status::NullPointer, "config_path and out_dir must be non-null");
    }
    let Ok(config_path) = CStr::from_ptr(config_path).to_str() else {
        return fail(C3Status::Utf8, "config_path is not valid UTF-8");
    };
    let Ok(out_dir) = CStr::from_ptr(out_dir).to_str() else {
        return fail(C3Status::Utf8, "out_dir is not valid UTF-8");
    };
    let mut config = match RunConfig::load(Path::new(config_path)) {
        Ok(c) => c,
        Err(e) => return fail(C3Status::Io, e.to_string()),
    };
    if !method.is_null() {
        let Ok(name) = CStr::from_ptr(method).to_str() else {
            return fail(C3Status::Utf8, "method is not valid UTF-8");
        };
        config.method = match name.parse::<Method>() {
            Ok(m) => m,
            Err(e) => return fail(C3Status::InvalidArgument, e),
        };
    }
    if workers > 0 {
        config.workers = workers;
    }
    match run(&config, Path::new(out_dir)) {
        Ok(_) => C3Status::Ok,
        Err(e) => fail(C3Status::RunFailed, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_key_matches_core() {
        let text = "Problem:\n  t\n\nContext:\n  ";
        let mut kappa = 0u64;
        let mut chars = 0u64;
        let mut secondary = 0u64;
        let status = unsafe {
            c3_context_key(
                text.as_ptr(),
                text.len(),
                &mut kappa,
                &mut chars,
                &mut secondary,
            )
        };
        assert_eq!(status, C3Status::Ok);
        let expected = context_key(text);
        assert_eq!(kappa, expected.kappa);
        assert_eq!(chars, expected.char_length);
        assert_eq!(secondary, expected.secondary_digest);
    }

    #[test]
    fn pass_at_k_and_error_reporting() {
        let mut out = 0.0f64;
        assert_eq!(unsafe { c3_pass_at_k(2, 1, 1, &mut out) }, C3Status::Ok);
        assert!((out - 0.5).abs() < 1e-12);

        assert_eq!(
            unsafe { c3_pass_at_k(2, 3, 1, &mut out) },
            C3Status::InvalidArgument
        );
        let mut buffer = [0 as c_char; 128];
        let len = unsafe { c3_last_error_message(buffer.as_mut_ptr(), buffer.len()) };
        assert!(len > 0);
    }

    #[test]
    fn credit_round_trip() {
        let means = [0.8f64, 0.4];
        let counts = [3u64, 1];
        let mut advantages = [0.0f64; 2];
        let status = unsafe {
            c3_credit_loo(means.as_ptr(), counts.as_ptr(), 2, advantages.as_mut_ptr())
        };
        assert_eq!(status, C3Status::Ok);
        assert!((advantages[0] - 0.4).abs() < 1e-12);
        assert!((advantages[1] + 0.4).abs() < 1e-12);

        let status = unsafe {
            c3_credit_full_sample(means.as_ptr(), counts.as_ptr(), 2, advantages.as_mut_ptr())
        };
        assert_eq!(status, C3Status::Ok);
        let expected = full_sample_credit(&means, &[3, 1]).unwrap();
        assert!((advantages[0] - expected[0]).abs() < 1e-12);
    }

    #[test]
    fn policy_handle_lifecycle() {
        let vocabs = [4u64, 4];
        let policy = unsafe { c3_policy_new(vocabs.as_ptr(), 2) };
        assert!(!policy.is_null());

        let context = "Problem:\n  t\n\nContext:\n  ";
        let mut log_prob = 0.0f64;
        let status = unsafe {
            c3_policy_log_prob(policy, 0, context.as_ptr(), context.len(), 2, &mut log_prob)
        };
        assert_eq!(status, C3Status::Ok);
        assert!((log_prob - (0.25f64).ln()).abs() < 1e-12);

        let mut token = u32::MAX;
        let status = unsafe {
            c3_policy_sample(policy, 1, context.as_ptr(), context.len(), 7, 0, &mut token)
        };
        assert_eq!(status, C3Status::Ok);
        assert!(token < 4);

        let dir = tempfile::tempdir().unwrap();
        let path = std::ffi::CString::new(
            dir.path().join("policy.txt").to_str().unwrap(),
        )
        .unwrap();
        assert_eq!(unsafe { c3_policy_save(policy, path.as_ptr()) }, C3Status::Ok);
        let reloaded = unsafe { c3_policy_load(vocabs.as_ptr(), 2, path.as_ptr()) };
        assert!(!reloaded.is_null());

        unsafe {
            c3_policy_free(policy);
            c3_policy_free(reloaded);
            c3_policy_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn run_experiment_from_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(
            &config_path,
            "method = \"sft_eval_only\"\nseeds = [0]\nepochs = 1\n\n[env]\ntask_count = 4\n\n[diagnostics]\ntasks = 2\n",
        )
        .unwrap();
        let out_dir = dir.path().join("out");
        let config_c = std::ffi::CString::new(config_path.to_str().unwrap()).unwrap();
        let out_c = std::ffi::CString::new(out_dir.to_str().unwrap()).unwrap();
        let status = unsafe {
            c3_run_experiment(config_c.as_ptr(), out_c.as_ptr(), std::ptr::null(), 0)
        };
        assert_eq!(status, C3Status::Ok);
        assert!(out_dir.join("sft_eval_only/seed_0/final.txt").exists());

        // method override by name
        let method = std::ffi::CString::new("magrpo").unwrap();
        let status = unsafe {
            c3_run_experiment(config_c.as_ptr(), out_c.as_ptr(), method.as_ptr(), 2)
        };
        assert_eq!(status, C3Status::Ok);
        assert!(out_dir.join("magrpo/seed_0/final.txt").exists());
    }

    #[test]
    fn generated_header_covers_surface() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/c3_ffi.h");
        let text = std::fs::read_to_string(&header).expect("build script generates the header");
        for symbol in [
            "c3_context_key",
            "c3_pass_at_k",
            "c3_credit_loo",
            "c3_credit_full_sample",
            "c3_policy_new",
            "c3_policy_free",
            "c3_policy_sample",
            "c3_run_experiment",
            "c3_last_error_message",
            "C3Policy",
            "C3Status",
        ] {
            assert!(text.contains(symbol), "header is missing {symbol}");
        }
    }
}
