//! C ABI over `icb-core`.
//!
//! Every fallible call returns an [`IcbStatus`]. On failure the message is
//! kept per thread and can be read with [`icb_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use icb_core::cli::{self, InsertRun, RunConfig};
use icb_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    UndefinedScore = 8,
    BufferTooSmall = 9,
    VerificationFailed = 10,
    Panic = 11,
}

impl From<&Error> for IcbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => IcbStatus::Shape,
            Error::InvalidArgument(_) => IcbStatus::InvalidArgument,
            Error::Config { .. } => IcbStatus::Config,
            Error::Format(_) | Error::Truncated(_) => IcbStatus::Format,
            Error::UndefinedScore(_) => IcbStatus::UndefinedScore,
            Error::Io { .. } => IcbStatus::Io,
        }
    }
}

/// Opaque run configuration.
pub struct IcbConfig {
    inner: RunConfig,
}

/// Opaque result of one insertion run.
pub struct IcbResult {
    run: InsertRun,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: IcbStatus, msg: impl Into<String>) -> IcbStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> IcbStatus {
    let status = IcbStatus::from(&e);
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> IcbStatus) -> IcbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(IcbStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, IcbStatus> {
    if p.is_null() {
        return Err(fail(IcbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IcbStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn icb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// New configuration holding the defaults.
#[no_mangle]
pub extern "C" fn icb_config_default() -> *mut IcbConfig {
    Box::into_raw(Box::new(IcbConfig {
        inner: RunConfig::default(),
    }))
}

/// Parses `key=value` config text into a new handle.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icb_config_parse(
    text: *const c_char,
    out: *mut *mut IcbConfig,
) -> IcbStatus {
    guard(|| {
        if out.is_null() {
            return fail(IcbStatus::NullPointer, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match cli::parse_config_str(text, Path::new("<memory>")) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(IcbConfig { inner: cfg }));
                IcbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Reads a config file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icb_config_load(
    path: *const c_char,
    out: *mut *mut IcbConfig,
) -> IcbStatus {
    guard(|| {
        if out.is_null() {
            return fail(IcbStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match cli::parse_config(Path::new(path)) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(IcbConfig { inner: cfg }));
                IcbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Sets one key. The handle is unchanged when the result would be invalid.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn icb_config_set(
    cfg: *mut IcbConfig,
    key: *const c_char,
    value: *const c_char,
) -> IcbStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(IcbStatus::NullPointer, "cfg is null");
        };
        let (key, value) = match (str_arg(key, "key"), str_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let mut next = cfg.inner.clone();
        if let Err(m) = next.set(key, value).and_then(|()| next.validate()) {
            return fail(IcbStatus::Config, m);
        }
        cfg.inner = next;
        IcbStatus::Ok
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icb_config_free(cfg: *mut IcbConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one insertion in memory. Inputs come from the config's paths or,
/// when none are set, from the seeded synthetic generator.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icb_insert(cfg: *const IcbConfig, out: *mut *mut IcbResult) -> IcbStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(IcbStatus::NullPointer, "cfg is null");
        };
        if out.is_null() {
            return fail(IcbStatus::NullPointer, "out is null");
        }
        let run =
            cli::load_inputs(&cfg.inner).and_then(|inputs| cli::run_insert(&cfg.inner, inputs));
        match run {
            Ok(run) => {
                *out = Box::into_raw(Box::new(IcbResult { run }));
                IcbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Generated grid dimensions.
///
/// # Safety
/// `res` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn icb_result_dims(
    res: *const IcbResult,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> IcbStatus {
    let Some(res) = res.as_ref() else {
        return fail(IcbStatus::NullPointer, "res is null");
    };
    if height.is_null() || width.is_null() || channels.is_null() {
        return fail(IcbStatus::NullPointer, "dimension pointer is null");
    }
    let g = &res.run.output.generated;
    *height = g.height();
    *width = g.width();
    *channels = g.channels();
    IcbStatus::Ok
}

/// Copies the generated latents (row-major `H × W × C`) into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn icb_result_copy_generated(
    res: *const IcbResult,
    buf: *mut f32,
    len: usize,
) -> IcbStatus {
    let Some(res) = res.as_ref() else {
        return fail(IcbStatus::NullPointer, "res is null");
    };
    let data = res.run.output.generated.data();
    if buf.is_null() {
        return fail(IcbStatus::NullPointer, "buf is null");
    }
    if len < data.len() {
        return fail(
            IcbStatus::BufferTooSmall,
            format!("need {} floats, got {len}", data.len()),
        );
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    IcbStatus::Ok
}

/// Identity proxy score. Fails with `UndefinedScore` when the mask is empty.
///
/// # Safety
/// `res` must be a live handle; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icb_result_proxy_score(
    res: *const IcbResult,
    score: *mut f64,
) -> IcbStatus {
    let Some(res) = res.as_ref() else {
        return fail(IcbStatus::NullPointer, "res is null");
    };
    if score.is_null() {
        return fail(IcbStatus::NullPointer, "score is null");
    }
    match res.run.score {
        Some(s) => {
            *score = s;
            IcbStatus::Ok
        }
        None => fail(IcbStatus::UndefinedScore, "insertion mask is empty"),
    }
}

/// Lower-case hex SHA-256 of the encoded generated tensor, NUL-terminated.
/// `len` must be at least 65.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn icb_result_sha256(
    res: *const IcbResult,
    buf: *mut c_char,
    len: usize,
) -> IcbStatus {
    let Some(res) = res.as_ref() else {
        return fail(IcbStatus::NullPointer, "res is null");
    };
    if buf.is_null() {
        return fail(IcbStatus::NullPointer, "buf is null");
    }
    let hex = res.run.generated_sha256();
    if len < hex.len() + 1 {
        return fail(
            IcbStatus::BufferTooSmall,
            format!("need {} bytes, got {len}", hex.len() + 1),
        );
    }
    ptr::copy_nonoverlapping(hex.as_ptr().cast::<c_char>(), buf, hex.len());
    *buf.add(hex.len()) = 0;
    IcbStatus::Ok
}

/// Writes `generated.icbt`, `alpha_trace.icbt` and `head_activation.icbt`
/// into `dir`, creating it if needed.
///
/// # Safety
/// `res` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn icb_result_write(res: *const IcbResult, dir: *const c_char) -> IcbStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(IcbStatus::NullPointer, "res is null");
        };
        let dir = match str_arg(dir, "dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        match res.run.write(Path::new(dir)) {
            Ok(_) => IcbStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `res` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icb_result_free(res: *mut IcbResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Runs the identity suite. Returns `VerificationFailed` when any check
/// fails; the report is then available through [`icb_last_error`].
#[no_mangle]
pub extern "C" fn icb_verify(trials: usize, seed: u64, inject_fault: bool) -> IcbStatus {
    guard(|| match cli::cmd_verify(trials, seed, inject_fault) {
        Ok(report) if report.passed() => IcbStatus::Ok,
        Ok(report) => fail(IcbStatus::VerificationFailed, report.to_string()),
        Err(e) => from_error(e),
    })
}
