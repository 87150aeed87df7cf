//! C ABI over the watermarking toolkit.
//!
//! Conventions:
//! - Opaque handles (`GmKey`, `GmModel`) are created and destroyed by this
//!   library; never free them with anything but the matching `gm_*_free`.
//! - Every fallible call returns a `GmStatus`; on failure the thread-local
//!   message retrieved by `gm_last_error` describes the cause.
//! - Buffers are caller-allocated; lengths are element counts, not bytes.
//! - The generated header lives at `include/gradmark.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};

use gradmark::checkpoint::load_checkpoint;
use gradmark::data::Dataset;
use gradmark::error::Error;
use gradmark::extract::{
    blackbox_estimate_gradient, whitebox_expected_gradient, ModelOracle, PredictionOracle,
};
use gradmark::nn::Model;
use gradmark::tensor::Tensor;
use gradmark::watermark::{
    decode, error_threshold, generate_key_from_message, generate_key_random, p_value,
    VerificationPolicy, WatermarkKey,
};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Dimension = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    OracleFailure = 7,
    Internal = 8,
}

/// Opaque watermark key handle.
pub struct GmKey {
    inner: WatermarkKey,
}

/// Opaque model handle (checkpoint plus a prediction oracle).
pub struct GmModel {
    model: Model,
    oracle: ModelOracle,
}

/// Verification outcome with the exact binomial threshold.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GmVerification {
    /// Mismatched bits between the decoded and embedded signature.
    pub n_error: u64,
    /// Maximum tolerated errors at the given significance threshold;
    /// -1 when even zero errors is not significant.
    pub eta: i64,
    /// Exact null-model probability of at most `n_error` errors.
    pub p_value: f64,
    /// 1 iff `n_error <= eta`.
    pub verified: u8,
}

/// Prediction callback for black-box extraction: fill `out_probs` with
/// `classes` scores for the `dim`-length input `x`; return 0 on success.
/// Called sequentially from the extraction thread.
pub type GmOracleFn = extern "C" fn(
    user_data: *mut c_void,
    x: *const f64,
    dim: usize,
    out_probs: *mut f64,
    classes: usize,
) -> i32;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> GmStatus {
    match err {
        Error::ShapeMismatch(_) | Error::DimensionMismatch(_) => GmStatus::Dimension,
        Error::NonFinite { .. } => GmStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Dataset(_) => GmStatus::InvalidArgument,
        Error::Io(_) | Error::Checkpoint(_) | Error::Json(_) => GmStatus::Io,
        Error::Oracle { .. } => GmStatus::OracleFailure,
        _ => GmStatus::Internal,
    }
}

fn fail(err: Error) -> GmStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> GmStatus) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic across FFI boundary");
            GmStatus::Internal
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn gm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

// ---- keys -----------------------------------------------------------------

/// Generate a key with all parts drawn from a seeded generator.
#[no_mangle]
pub unsafe extern "C" fn gm_key_generate_random(
    n_bits: usize,
    carrier_size: usize,
    input_dim: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut GmKey,
) -> GmStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return GmStatus::NullPointer;
        }
        match generate_key_random(n_bits, carrier_size, input_dim, classes, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GmKey { inner }));
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Generate a key bound to an identity message (SHA-256 + counter-mode
/// expansion); identical messages produce identical keys.
#[no_mangle]
pub unsafe extern "C" fn gm_key_generate_from_message(
    message: *const c_char,
    n_bits: usize,
    carrier_size: usize,
    input_dim: usize,
    classes: usize,
    out: *mut *mut GmKey,
) -> GmStatus {
    guard(|| {
        let (Some(msg), false) = (cstr(message), out.is_null()) else {
            set_error("null or non-UTF8 argument");
            return GmStatus::NullPointer;
        };
        match generate_key_from_message(msg, n_bits, carrier_size, input_dim, classes) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GmKey { inner }));
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_load(path: *const c_char, out: *mut *mut GmKey) -> GmStatus {
    guard(|| {
        let (Some(path), false) = (cstr(path), out.is_null()) else {
            set_error("null or non-UTF8 argument");
            return GmStatus::NullPointer;
        };
        match WatermarkKey::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GmKey { inner }));
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_save(key: *const GmKey, path: *const c_char) -> GmStatus {
    guard(|| {
        let (Some(key), Some(path)) = (key.as_ref(), cstr(path)) else {
            set_error("null argument");
            return GmStatus::NullPointer;
        };
        match key.inner.save(path) {
            Ok(()) => GmStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_free(key: *mut GmKey) {
    if !key.is_null() {
        drop(Box::from_raw(key));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_n_bits(key: *const GmKey) -> usize {
    key.as_ref().map_or(0, |k| k.inner.n_bits())
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_carrier_size(key: *const GmKey) -> usize {
    key.as_ref().map_or(0, |k| k.inner.carrier_size())
}

#[no_mangle]
pub unsafe extern "C" fn gm_key_target_class(key: *const GmKey) -> usize {
    key.as_ref().map_or(0, |k| k.inner.target_class())
}

/// Copy the signature bits (0/1 bytes) into `out` (`len >= n_bits`).
#[no_mangle]
pub unsafe extern "C" fn gm_key_bits(key: *const GmKey, out: *mut u8, len: usize) -> GmStatus {
    guard(|| {
        let Some(k) = key.as_ref() else {
            set_error("key is null");
            return GmStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out buffer is null");
            return GmStatus::NullPointer;
        }
        if len < k.inner.n_bits() {
            set_error(format!("buffer holds {len}, need {}", k.inner.n_bits()));
            return GmStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(k.inner.bits().as_ptr(), out, k.inner.n_bits());
        GmStatus::Ok
    })
}

// ---- models -----------------------------------------------------------------

/// Load a checkpoint file written by the toolkit.
#[no_mangle]
pub unsafe extern "C" fn gm_model_load(path: *const c_char, out: *mut *mut GmModel) -> GmStatus {
    guard(|| {
        let (Some(path), false) = (cstr(path), out.is_null()) else {
            set_error("null or non-UTF8 argument");
            return GmStatus::NullPointer;
        };
        let model = match load_checkpoint(path) {
            Ok((m, _)) => m,
            Err(e) => return fail(e),
        };
        match ModelOracle::new(model.clone()) {
            Ok(oracle) => {
                *out = Box::into_raw(Box::new(GmModel { model, oracle }));
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn gm_model_free(model: *mut GmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gm_model_input_dim(model: *const GmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

#[no_mangle]
pub unsafe extern "C" fn gm_model_class_count(model: *const GmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.num_classes)
}

/// Class probabilities for one flat input (`x` has `dim` values, `out_probs`
/// has room for `classes` values).
#[no_mangle]
pub unsafe extern "C" fn gm_model_predict(
    model: *const GmModel,
    x: *const f64,
    dim: usize,
    out_probs: *mut f64,
    classes: usize,
) -> GmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            set_error("model is null");
            return GmStatus::NullPointer;
        };
        if x.is_null() || out_probs.is_null() {
            set_error("null buffer");
            return GmStatus::NullPointer;
        }
        if classes < m.model.config.num_classes {
            set_error(format!(
                "probs buffer holds {classes}, need {}",
                m.model.config.num_classes
            ));
            return GmStatus::BufferTooSmall;
        }
        let input = std::slice::from_raw_parts(x, dim);
        match m.oracle.query(input) {
            Ok(probs) => {
                std::ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, probs.len());
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

// ---- extraction -----------------------------------------------------------------

fn samples_dataset(
    model_dim: usize,
    shape: (usize, usize, usize),
    classes: usize,
    target: usize,
    samples: &[f64],
    n: usize,
    dim: usize,
) -> Result<Dataset, Error> {
    if dim != model_dim {
        return Err(Error::DimensionMismatch(format!(
            "samples have dim {dim}, model expects {model_dim}"
        )));
    }
    let (h, w, c) = shape;
    Dataset::new(
        Tensor::new(vec![n, h, w, c], samples.to_vec())?,
        vec![target; n],
        "ffi",
        classes,
    )
}

/// Expected input gradient over the carrier set by backpropagation.
/// `samples` holds `n` flat images of the key's target class, row-major.
/// `out_gradient` has room for `carrier_size` values.
#[no_mangle]
pub unsafe extern "C" fn gm_whitebox_gradient(
    model: *const GmModel,
    key: *const GmKey,
    samples: *const f64,
    n: usize,
    dim: usize,
    out_gradient: *mut f64,
    gradient_len: usize,
) -> GmStatus {
    guard(|| {
        let (Some(m), Some(k)) = (model.as_ref(), key.as_ref()) else {
            set_error("null handle");
            return GmStatus::NullPointer;
        };
        if samples.is_null() || out_gradient.is_null() {
            set_error("null buffer");
            return GmStatus::NullPointer;
        }
        if gradient_len < k.inner.carrier_size() {
            set_error(format!(
                "gradient buffer holds {gradient_len}, need {}",
                k.inner.carrier_size()
            ));
            return GmStatus::BufferTooSmall;
        }
        let flat = std::slice::from_raw_parts(samples, n * dim);
        let ds = match samples_dataset(
            m.model.input_dim(),
            m.model.config.input_shape,
            m.model.config.num_classes,
            k.inner.target_class(),
            flat,
            n,
            dim,
        ) {
            Ok(ds) => ds,
            Err(e) => return fail(e),
        };
        match whitebox_expected_gradient(&m.model, &k.inner, &ds) {
            Ok(est) => {
                std::ptr::copy_nonoverlapping(
                    est.values.as_ptr(),
                    out_gradient,
                    est.values.len(),
                );
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

struct CallbackOracle {
    f: GmOracleFn,
    user_data: *mut c_void,
    dim: usize,
    classes: usize,
    queries: AtomicU64,
}

// The extraction path issues queries sequentially from one thread; the
// callback contract requires nothing stronger.
unsafe impl Send for CallbackOracle {}
unsafe impl Sync for CallbackOracle {}

impl PredictionOracle for CallbackOracle {
    fn query(&self, x: &[f64]) -> gradmark::Result<Vec<f64>> {
        let mut probs = vec![0.0f64; self.classes];
        let rc = (self.f)(
            self.user_data,
            x.as_ptr(),
            x.len(),
            probs.as_mut_ptr(),
            self.classes,
        );
        let served = self.queries.fetch_add(1, Ordering::Relaxed) + 1;
        if rc != 0 {
            return Err(Error::Oracle {
                queries_done: served,
                detail: format!("callback returned {rc}"),
            });
        }
        Ok(probs)
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn queries_served(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

/// Zeroth-order gradient estimate against a caller-supplied prediction
/// callback: one query per sample plus one per carrier node per sample,
/// `out_query_count` receives exactly n * (carrier_size + 1).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gm_blackbox_gradient(
    oracle: GmOracleFn,
    user_data: *mut c_void,
    input_dim: usize,
    classes: usize,
    key: *const GmKey,
    samples: *const f64,
    n: usize,
    h: f64,
    out_gradient: *mut f64,
    gradient_len: usize,
    out_query_count: *mut u64,
) -> GmStatus {
    guard(|| {
        let Some(k) = key.as_ref() else {
            set_error("key is null");
            return GmStatus::NullPointer;
        };
        if samples.is_null() || out_gradient.is_null() {
            set_error("null buffer");
            return GmStatus::NullPointer;
        }
        if gradient_len < k.inner.carrier_size() {
            set_error(format!(
                "gradient buffer holds {gradient_len}, need {}",
                k.inner.carrier_size()
            ));
            return GmStatus::BufferTooSmall;
        }
        let flat = std::slice::from_raw_parts(samples, n * input_dim);
        let ds = match samples_dataset(
            input_dim,
            (1, input_dim, 1),
            classes.max(k.inner.target_class() + 1),
            k.inner.target_class(),
            flat,
            n,
            input_dim,
        ) {
            Ok(ds) => ds,
            Err(e) => return fail(e),
        };
        let cb = CallbackOracle {
            f: oracle,
            user_data,
            dim: input_dim,
            classes,
            queries: AtomicU64::new(0),
        };
        match blackbox_estimate_gradient(&cb, &k.inner, &ds, h) {
            Ok(est) => {
                std::ptr::copy_nonoverlapping(
                    est.values.as_ptr(),
                    out_gradient,
                    est.values.len(),
                );
                if !out_query_count.is_null() {
                    *out_query_count = est.meta.query_count;
                }
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

// ---- decoding and verification ------------------------------------------------

/// Decode the signature bits (0/1 bytes) carried by a gradient vector.
#[no_mangle]
pub unsafe extern "C" fn gm_decode(
    key: *const GmKey,
    gradient: *const f64,
    gradient_len: usize,
    out_bits: *mut u8,
    bits_len: usize,
) -> GmStatus {
    guard(|| {
        let Some(k) = key.as_ref() else {
            set_error("key is null");
            return GmStatus::NullPointer;
        };
        if gradient.is_null() || out_bits.is_null() {
            set_error("null buffer");
            return GmStatus::NullPointer;
        }
        if bits_len < k.inner.n_bits() {
            set_error(format!("bits buffer holds {bits_len}, need {}", k.inner.n_bits()));
            return GmStatus::BufferTooSmall;
        }
        let g = std::slice::from_raw_parts(gradient, gradient_len);
        match decode(g, &k.inner) {
            Ok(bits) => {
                std::ptr::copy_nonoverlapping(bits.as_ptr(), out_bits, bits.len());
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Largest tolerated error count eta with null probability below tau;
/// -1 when the pair is unusable.
#[no_mangle]
pub unsafe extern "C" fn gm_error_threshold(
    n_bits: usize,
    tau: f64,
    out_eta: *mut i64,
) -> GmStatus {
    guard(|| {
        if out_eta.is_null() {
            set_error("out pointer is null");
            return GmStatus::NullPointer;
        }
        match error_threshold(n_bits, tau) {
            Ok(eta) => {
                *out_eta = eta;
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Exact null-model probability of observing at most `n_error` mismatches.
#[no_mangle]
pub extern "C" fn gm_p_value(n_bits: usize, n_error: usize) -> f64 {
    p_value(n_bits, n_error)
}

/// Decode a gradient vector and run the binomial ownership test.
#[no_mangle]
pub unsafe extern "C" fn gm_verify(
    key: *const GmKey,
    gradient: *const f64,
    gradient_len: usize,
    tau: f64,
    out: *mut GmVerification,
) -> GmStatus {
    guard(|| {
        let Some(k) = key.as_ref() else {
            set_error("key is null");
            return GmStatus::NullPointer;
        };
        if gradient.is_null() || out.is_null() {
            set_error("null buffer");
            return GmStatus::NullPointer;
        }
        let g = std::slice::from_raw_parts(gradient, gradient_len);
        let policy = VerificationPolicy { tau };
        match gradmark::watermark::verify(
            g,
            &k.inner,
            &policy,
            gradmark::watermark::ExtractionMeta::white_box(0),
        ) {
            Ok(report) => {
                *out = GmVerification {
                    n_error: report.n_error as u64,
                    eta: report.eta,
                    p_value: report.p_value,
                    verified: u8::from(report.verified),
                };
                GmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
