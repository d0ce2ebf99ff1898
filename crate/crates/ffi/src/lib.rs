//! C interface to the cofuse pipeline.
//!
//! Models are opaque handles created by `cofuse_model_new` or
//! `cofuse_train` and released with `cofuse_model_free`. Every fallible
//! call returns a [`CofuseStatus`]; the message of the most recent failure
//! on the calling thread is available from `cofuse_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cofuse::harness::{evaluate, train, Model, PipelineConfig};
use cofuse::numerics::{ParamStore, Tensor};
use cofuse::wavelet::{haar_forward, haar_inverse};
use cofuse::Error;

/// Result codes. `COFUSE_STATUS_CONFIG` and `COFUSE_STATUS_DIVERGENCE`
/// share their values with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CofuseStatus {
    Ok = 0,
    Error = 1,
    Config = 2,
    Divergence = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    Io = 6,
    Panic = 7,
}

/// Aggregate scores of one evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CofuseMetrics {
    pub iou: f64,
    pub mse_to_clean: f64,
    pub ticks: usize,
}

/// A pipeline model together with the configuration it was built from.
pub struct CofuseModel {
    model: Model,
    config: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CofuseStatus {
    match e {
        Error::Config(_) => CofuseStatus::Config,
        Error::Divergence { .. } => CofuseStatus::Divergence,
        Error::Shape { .. } | Error::InvalidArgument { .. } => CofuseStatus::InvalidArgument,
        Error::Io(_) | Error::Format(_) => CofuseStatus::Io,
        _ => CofuseStatus::Error,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (CofuseStatus, String)>) -> CofuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CofuseStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CofuseStatus::Panic
        }
    }
}

fn lib<T>(r: cofuse::Result<T>) -> Result<T, (CofuseStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CofuseStatus, String) {
    (CofuseStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CofuseStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CofuseStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Null or empty JSON selects the default configuration.
unsafe fn read_config(json: *const c_char) -> Result<PipelineConfig, (CofuseStatus, String)> {
    if json.is_null() {
        return Ok(PipelineConfig::default());
    }
    let text = read_str(json, "config")?;
    if text.trim().is_empty() {
        return Ok(PipelineConfig::default());
    }
    lib(PipelineConfig::from_json(text))
}

unsafe fn model_ref<'a>(m: *const CofuseModel) -> Result<&'a CofuseModel, (CofuseStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cofuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an untrained model. `config_json` may be null for defaults.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be
/// a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cofuse_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut CofuseModel,
) -> CofuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = read_config(config_json)?;
        let model = lib(Model::new(&config, seed))?;
        *out = Box::into_raw(Box::new(CofuseModel { model, config }));
        Ok(())
    })
}

/// Trains a model from the configuration's training seed and stores the
/// per-step losses in `losses` (capacity `losses_len`; may be null).
///
/// # Safety
/// Pointer arguments must be null (where allowed) or valid; `losses` must
/// hold `losses_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cofuse_train(
    config_json: *const c_char,
    out: *mut *mut CofuseModel,
    losses: *mut f64,
    losses_len: usize,
) -> CofuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = read_config(config_json)?;
        let report = lib(train(&config))?;
        if !losses.is_null() {
            let n = losses_len.min(report.losses.len());
            std::slice::from_raw_parts_mut(losses, n).copy_from_slice(&report.losses[..n]);
        }
        *out = Box::into_raw(Box::new(CofuseModel {
            model: report.model,
            config,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cofuse_model_free(model: *mut CofuseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cofuse_model_num_values(model: *const CofuseModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.store.num_values())
}

/// Scores the model on its configuration's evaluation scenarios.
///
/// # Safety
/// `model` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cofuse_evaluate(model: *const CofuseModel, out: *mut CofuseMetrics) -> CofuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = lib(evaluate(&m.model, &m.config, &m.config.channel, m.config.training.seed))?;
        *out = CofuseMetrics {
            iou: rec.iou,
            mse_to_clean: rec.mse_to_clean,
            ticks: rec.ticks,
        };
        Ok(())
    })
}

/// Writes the parameters in the binary parameter format.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cofuse_model_save(model: *const CofuseModel, path: *const c_char) -> CofuseStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = read_str(path, "path")?;
        lib(m.model.store.save(path))
    })
}

/// Replaces the parameter values with those stored at `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cofuse_model_load(model: *mut CofuseModel, path: *const c_char) -> CofuseStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let path = read_str(path, "path")?;
        let stored = lib(ParamStore::load(path))?;
        lib(m.model.store.load_values_from(&stored))
    })
}

unsafe fn haar(input: *const f64, c: usize, h: usize, w: usize, out: *mut f64, inverse: bool) -> CofuseStatus {
    guard(|| {
        if input.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let n = c * h * w;
        let data = std::slice::from_raw_parts(input, n).to_vec();
        let result = if inverse {
            lib(Tensor::new(&[4 * c, h / 2, w / 2], data).and_then(|t| haar_inverse(&t)))?
        } else {
            lib(Tensor::new(&[c, h, w], data).and_then(|t| haar_forward(&t)))?
        };
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(result.data());
        Ok(())
    })
}

/// One-level Haar analysis of a `c×h×w` array into the packed
/// `4c×(h/2)×(w/2)` layout (LL, LH, HL, HH blocks of `c` channels).
///
/// # Safety
/// `input` and `out` must each hold `c*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn cofuse_haar_forward(
    input: *const f64,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> CofuseStatus {
    haar(input, c, h, w, out, false)
}

/// Inverse of `cofuse_haar_forward`; `c`, `h`, `w` describe the output.
///
/// # Safety
/// `input` and `out` must each hold `c*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn cofuse_haar_inverse(
    input: *const f64,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> CofuseStatus {
    haar(input, c, h, w, out, true)
}
