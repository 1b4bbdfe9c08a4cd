//! C ABI for the watermark codec: opaque handles, integer status codes, and
//! a thread-local last-error message. The header is generated by cbindgen
//! into `include/anchormark.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anchormark::backbone::{Backbone, StubBackbone};
use anchormark::extractor::{FeatureExtractor, ProjectedExtractor, RawExtractor};
use anchormark::imageio::{self, PerturbationBudget};
use anchormark::watermark::{self, EmbedConfig, SecretKey, WatermarkMessage};
use anchormark::{distortion, projector, rng, Error};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmStatus {
    AmOk = 0,
    AmErrArgument = 1,
    AmErrIo = 2,
    AmErrFormat = 3,
    AmErrDimension = 4,
    AmErrNumeric = 5,
    AmErrNullPointer = 6,
    AmErrBufferTooSmall = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> AmStatus {
    match err {
        Error::Argument(_) => AmStatus::AmErrArgument,
        Error::Io { .. } | Error::ImageLoad { .. } => AmStatus::AmErrIo,
        Error::Checkpoint(_) | Error::KeyFile(_) | Error::Config(_) | Error::Registry(..) => {
            AmStatus::AmErrFormat
        }
        Error::Dimension(_) => AmStatus::AmErrDimension,
        Error::Numeric(_) | Error::Diverged { .. } => AmStatus::AmErrNumeric,
    }
}

fn fail(err: Error) -> AmStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

fn null_err(what: &str) -> AmStatus {
    set_error(&format!("null pointer: {what}"));
    AmStatus::AmErrNullPointer
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, AmStatus> {
    if ptr.is_null() {
        return Err(null_err(what));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(AmStatus::AmErrArgument)
        }
    }
}

/// Opaque secret-key handle.
pub struct AmKey {
    inner: SecretKey,
}

/// Opaque feature-extractor handle (backbone plus optional projector).
pub struct AmExtractor {
    inner: Box<dyn FeatureExtractor>,
}

/// Embedding options; zero/negative fields fall back to defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AmEmbedOptions {
    pub iterations: u32,
    pub lambda_w: f64,
    pub mu_margin: f64,
    pub step_size: f64,
    pub target_psnr_db: f64,
    pub seed: u64,
}

fn embed_config(opts: Option<&AmEmbedOptions>) -> Result<EmbedConfig, Error> {
    let mut cfg = EmbedConfig::default();
    if let Some(o) = opts {
        if o.iterations > 0 {
            cfg.iterations = o.iterations as usize;
        }
        if o.lambda_w > 0.0 {
            cfg.lambda_w = o.lambda_w;
        }
        if o.mu_margin > 0.0 {
            cfg.mu_margin = o.mu_margin;
        }
        if o.step_size > 0.0 {
            cfg.step_size = o.step_size;
        }
        if o.target_psnr_db > 0.0 {
            cfg.budget = PerturbationBudget::new(o.target_psnr_db)?;
        }
    }
    Ok(cfg)
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn am_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the thread-local message for the most recent failure into `buf`.
/// Returns the full message length (excluding NUL); the copy is truncated
/// to `cap - 1` bytes.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be NULL to query the length).
#[no_mangle]
pub unsafe extern "C" fn am_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Generate an orthonormal secret key (k message bits in a d-dimensional
/// feature space), deterministic in `seed`.
///
/// # Safety
/// `out` must be a valid pointer; the result must be freed with
/// [`am_key_free`].
#[no_mangle]
pub unsafe extern "C" fn am_key_generate(
    seed: u64,
    k: u32,
    d: u32,
    out: *mut *mut AmKey,
) -> AmStatus {
    if out.is_null() {
        return null_err("out");
    }
    match watermark::generate_key(seed, k as usize, d as usize) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(AmKey { inner }));
            AmStatus::AmOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_key_load(path: *const c_char, out: *mut *mut AmKey) -> AmStatus {
    if out.is_null() {
        return null_err("out");
    }
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match watermark::load_key(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(AmKey { inner }));
            AmStatus::AmOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `key` must come from this library; `path` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn am_key_save(key: *const AmKey, path: *const c_char) -> AmStatus {
    let Some(key) = key.as_ref() else {
        return null_err("key");
    };
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match watermark::save_key(&key.inner, &path) {
        Ok(()) => AmStatus::AmOk,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `key` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn am_key_bits(key: *const AmKey) -> u32 {
    key.as_ref().map(|k| k.inner.k as u32).unwrap_or(0)
}

/// # Safety
/// `key` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn am_key_dim(key: *const AmKey) -> u32 {
    key.as_ref().map(|k| k.inner.d as u32).unwrap_or(0)
}

/// # Safety
/// `key` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn am_key_free(key: *mut AmKey) {
    if !key.is_null() {
        drop(Box::from_raw(key));
    }
}

/// Create a stub-backbone extractor. With a checkpoint path the features are
/// the trained projector's output; otherwise raw normalized backbone
/// features.
///
/// # Safety
/// `checkpoint_path` may be NULL; `out` must be valid; free the handle with
/// [`am_extractor_free`].
#[no_mangle]
pub unsafe extern "C" fn am_extractor_new_stub(
    seed: u64,
    dim: u32,
    checkpoint_path: *const c_char,
    out: *mut *mut AmExtractor,
) -> AmStatus {
    if out.is_null() {
        return null_err("out");
    }
    let backbone: Arc<dyn Backbone> = match StubBackbone::new(seed, dim as usize) {
        Ok(b) => Arc::new(b),
        Err(e) => return fail(e),
    };
    let inner: Box<dyn FeatureExtractor> = if checkpoint_path.is_null() {
        Box::new(RawExtractor::new(backbone))
    } else {
        let path = match path_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let params = match projector::load_params(&path) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        match ProjectedExtractor::new(backbone, params) {
            Ok(ex) => Box::new(ex),
            Err(e) => return fail(e),
        }
    };
    *out = Box::into_raw(Box::new(AmExtractor { inner }));
    AmStatus::AmOk
}

/// # Safety
/// `ex` must be a valid handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn am_extractor_dim(ex: *const AmExtractor) -> u32 {
    ex.as_ref().map(|e| e.inner.dim() as u32).unwrap_or(0)
}

/// # Safety
/// `ex` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn am_extractor_free(ex: *mut AmExtractor) {
    if !ex.is_null() {
        drop(Box::from_raw(ex));
    }
}

fn run_embed(
    ex: &AmExtractor,
    key: &AmKey,
    image_path: &Path,
    message: &str,
    out_path: &Path,
    opts: Option<&AmEmbedOptions>,
) -> Result<(), Error> {
    let msg = WatermarkMessage::from_bitstring(message)?;
    let img = imageio::load_image(image_path, ex.inner.input_size())?;
    let cfg = embed_config(opts)?;
    let seed = opts.map(|o| o.seed).unwrap_or(0);
    let mut r = rng::derive(seed, "ffi-embed", 0, 0);
    let (marked, _) = watermark::embed(
        &img,
        &key.inner,
        &msg,
        ex.inner.as_ref(),
        &distortion::differentiable_transform_set(),
        &cfg,
        &mut r,
    )?;
    let quantized = watermark::quantize_to_budget(&marked, &img, &cfg.budget)?;
    quantized.save_png(out_path)
}

/// Embed `message_bits` into the image file and write the marked PNG.
///
/// # Safety
/// All pointers must be valid; `opts` may be NULL for defaults.
#[no_mangle]
pub unsafe extern "C" fn am_embed_file(
    ex: *const AmExtractor,
    key: *const AmKey,
    image_path: *const c_char,
    message_bits: *const c_char,
    out_path: *const c_char,
    opts: *const AmEmbedOptions,
) -> AmStatus {
    let Some(ex) = ex.as_ref() else {
        return null_err("extractor");
    };
    let Some(key) = key.as_ref() else {
        return null_err("key");
    };
    let image_path = match path_arg(image_path, "image_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out_path = match path_arg(out_path, "out_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    if message_bits.is_null() {
        return null_err("message_bits");
    }
    let message = match CStr::from_ptr(message_bits).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("message_bits is not valid UTF-8");
            return AmStatus::AmErrArgument;
        }
    };
    match run_embed(ex, key, &image_path, message, &out_path, opts.as_ref()) {
        Ok(()) => AmStatus::AmOk,
        Err(e) => fail(e),
    }
}

/// Extract the message from an image file into `bits_out` as a
/// NUL-terminated bitstring; `bits_cap` must be at least k + 1.
///
/// # Safety
/// All pointers must be valid and `bits_out` must hold `bits_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn am_extract_file(
    ex: *const AmExtractor,
    key: *const AmKey,
    image_path: *const c_char,
    bits_out: *mut c_char,
    bits_cap: usize,
) -> AmStatus {
    let Some(ex) = ex.as_ref() else {
        return null_err("extractor");
    };
    let Some(key) = key.as_ref() else {
        return null_err("key");
    };
    if bits_out.is_null() {
        return null_err("bits_out");
    }
    if bits_cap < key.inner.k + 1 {
        set_error(&format!(
            "bits_out needs capacity {} for k={} bits",
            key.inner.k + 1,
            key.inner.k
        ));
        return AmStatus::AmErrBufferTooSmall;
    }
    let image_path = match path_arg(image_path, "image_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let decoded = imageio::load_image(&image_path, ex.inner.input_size())
        .and_then(|img| watermark::extract(&img, &key.inner, ex.inner.as_ref()));
    match decoded {
        Ok(msg) => {
            let s = msg.to_bitstring();
            std::ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, bits_out, s.len());
            *bits_out.add(s.len()) = 0;
            AmStatus::AmOk
        }
        Err(e) => fail(e),
    }
}

/// PSNR in dB between two image files (both resized to the working size).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn am_psnr_files(
    path_a: *const c_char,
    path_b: *const c_char,
    out_db: *mut f64,
) -> AmStatus {
    if out_db.is_null() {
        return null_err("out_db");
    }
    let a = match path_arg(path_a, "path_a") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let b = match path_arg(path_b, "path_b") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let result = imageio::load_image(&a, imageio::WORKING_SIZE).and_then(|ia| {
        let ib = imageio::load_image(&b, imageio::WORKING_SIZE)?;
        imageio::psnr(&ia, &ib)
    });
    match result {
        Ok(v) => {
            *out_db = v;
            AmStatus::AmOk
        }
        Err(e) => fail(e),
    }
}

/// Fraction of matching bits between two bitstrings; returns -1.0 on error.
///
/// # Safety
/// Both pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn am_bit_accuracy(bits_a: *const c_char, bits_b: *const c_char) -> f64 {
    if bits_a.is_null() || bits_b.is_null() {
        set_error("null bitstring");
        return -1.0;
    }
    let parse = |p: *const c_char| -> Result<WatermarkMessage, Error> {
        let s = unsafe { CStr::from_ptr(p) }
            .to_str()
            .map_err(|_| Error::Argument("bitstring is not valid UTF-8".into()))?;
        WatermarkMessage::from_bitstring(s)
    };
    match (parse(bits_a), parse(bits_b)) {
        (Ok(a), Ok(b)) => match watermark::bit_accuracy(&a, &b) {
            Ok(v) => v,
            Err(e) => {
                set_error(&e.to_string());
                -1.0
            }
        },
        (Err(e), _) | (_, Err(e)) => {
            set_error(&e.to_string());
            -1.0
        }
    }
}
