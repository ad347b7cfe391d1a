//! C ABI over the itdm training library.
//!
//! Conventions:
//! - Every fallible call returns an [`ItdmStatus`]; `ITDM_STATUS_OK` is 0.
//! - On failure, a thread-local message is set; fetch it with
//!   [`itdm_last_error_message`] before the next failing call on the thread.
//! - Handles (`ItdmDataset`, `ItdmConfig`, `ItdmRun`) are opaque; free them
//!   with their matching `_free` function exactly once.
//! - Strings returned through `char**` out-parameters are owned by the
//!   caller and must be released with [`itdm_string_free`].
//! - Panics abort the process; they indicate a bug in this crate.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::c_char;

use itdm::cli::metrics_csv_string;
use itdm::data::{load_idx, synthetic_blobs, Dataset};
use itdm::kernels::KernelBank;
use itdm::mmd::{match_class_conditional, match_joint, mmd_sq_biased, FeatureBatch};
use itdm::tensor::Tensor;
use itdm::trainer::{summarize, train, MetricsRecord, RunSummary, TrainConfig};
use itdm::{Error, Rng};

/// Result code of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ShapeMismatch = 4,
    NonFinite = 5,
    EmptyInput = 6,
    IdxFormat = 7,
    Io = 8,
    Diverged = 9,
    Json = 10,
    StaleCache = 11,
    Internal = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn record_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: Error) -> ItdmStatus {
    record_error(&err.to_string());
    match err {
        Error::ShapeMismatch(_) => ItdmStatus::ShapeMismatch,
        Error::InvalidArgument(_) => ItdmStatus::InvalidArgument,
        Error::NonFinite(_) => ItdmStatus::NonFinite,
        Error::EmptyInput(_) => ItdmStatus::EmptyInput,
        Error::IdxBadMagic { .. } | Error::IdxTruncated { .. } | Error::IdxCountMismatch { .. } => {
            ItdmStatus::IdxFormat
        }
        Error::StaleCache { .. } => ItdmStatus::StaleCache,
        Error::Diverged { .. } => ItdmStatus::Diverged,
        Error::CheckpointVersion { .. } => ItdmStatus::InvalidArgument,
        Error::Io(_) => ItdmStatus::Io,
        Error::Json(_) => ItdmStatus::Json,
    }
}

fn null_pointer(what: &str) -> ItdmStatus {
    record_error(&format!("null pointer: {what}"));
    ItdmStatus::NullPointer
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, ItdmStatus> {
    if ptr.is_null() {
        return Err(null_pointer(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        record_error(&format!("{what} is not valid UTF-8"));
        ItdmStatus::InvalidUtf8
    })
}

fn give_string(text: String, out: *mut *mut c_char) -> ItdmStatus {
    match CString::new(text) {
        Ok(s) => {
            unsafe { *out = s.into_raw() };
            ItdmStatus::Ok
        }
        Err(_) => {
            record_error("output contained an interior NUL byte");
            ItdmStatus::Internal
        }
    }
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn itdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next failing call on the same
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn itdm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string produced by this library.
///
/// # Safety
/// `s` must be a pointer previously returned through a `char**` out-parameter
/// of this library, not yet freed; or null, in which case this is a no-op.
#[no_mangle]
pub unsafe extern "C" fn itdm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque labeled dataset handle.
pub struct ItdmDataset(Dataset);

/// Opaque training-configuration handle.
pub struct ItdmConfig(TrainConfig);

/// Opaque finished-run handle: the metrics stream plus its summary.
pub struct ItdmRun {
    records: Vec<MetricsRecord>,
    summary: RunSummary,
}

/// Load an IDX image/label pair from disk.
///
/// # Safety
/// `images_path` and `labels_path` must be NUL-terminated strings; `out` must
/// be a valid location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn itdm_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut ItdmDataset,
) -> ItdmStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let images = match cstr_arg(images_path, "images_path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let labels = match cstr_arg(labels_path, "labels_path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match load_idx(Path::new(images), Path::new(labels)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(ItdmDataset(ds)));
            ItdmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Generate a synthetic blob dataset (class means on scaled one-hot corners).
///
/// # Safety
/// `out` must be a valid location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn itdm_dataset_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    out: *mut *mut ItdmDataset,
) -> ItdmStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let mut rng = Rng::new(seed);
    match synthetic_blobs(classes, per_class, dim, separation, &mut rng) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(ItdmDataset(ds)));
            ItdmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Number of samples, or -1 if the handle is null.
///
/// # Safety
/// `dataset` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn itdm_dataset_len(dataset: *const ItdmDataset) -> i64 {
    if dataset.is_null() {
        return -1;
    }
    (*dataset).0.len() as i64
}

/// Number of classes, or -1 if the handle is null.
///
/// # Safety
/// `dataset` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn itdm_dataset_num_classes(dataset: *const ItdmDataset) -> i64 {
    if dataset.is_null() {
        return -1;
    }
    (*dataset).0.num_classes() as i64
}

/// # Safety
/// `dataset` must be a handle from this library, freed at most once; null is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn itdm_dataset_free(dataset: *mut ItdmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fresh configuration with the library defaults.
///
/// # Safety
/// `out` must be a valid location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn itdm_config_default(out: *mut *mut ItdmConfig) -> ItdmStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    *out = Box::into_raw(Box::new(ItdmConfig(TrainConfig::default())));
    ItdmStatus::Ok
}

/// Parse a configuration from its JSON form (the `config` object inside a
/// run summary).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid location to
/// store the new handle.
#[no_mangle]
pub unsafe extern "C" fn itdm_config_from_json(
    json: *const c_char,
    out: *mut *mut ItdmConfig,
) -> ItdmStatus {
    if out.is_null() {
        return null_pointer("out");
    }
    let text = match cstr_arg(json, "json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cfg: TrainConfig = match serde_json::from_str(text) {
        Ok(cfg) => cfg,
        Err(e) => return fail(Error::Json(e)),
    };
    if let Err(e) = cfg.validate() {
        return fail(e);
    }
    *out = Box::into_raw(Box::new(ItdmConfig(cfg)));
    ItdmStatus::Ok
}

/// Serialize a configuration to JSON. The caller frees the string.
///
/// # Safety
/// `config` must be a live handle; `out` must be valid for a store.
#[no_mangle]
pub unsafe extern "C" fn itdm_config_to_json(
    config: *const ItdmConfig,
    out: *mut *mut c_char,
) -> ItdmStatus {
    if config.is_null() {
        return null_pointer("config");
    }
    if out.is_null() {
        return null_pointer("out");
    }
    match serde_json::to_string_pretty(&(*config).0) {
        Ok(text) => give_string(text, out),
        Err(e) => fail(Error::Json(e)),
    }
}

/// # Safety
/// `config` must be a handle from this library, freed at most once; null is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn itdm_config_free(config: *mut ItdmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run training to completion. Blocks until done.
///
/// # Safety
/// All three handles must be live; `out` must be valid for a store.
#[no_mangle]
pub unsafe extern "C" fn itdm_train(
    config: *const ItdmConfig,
    train_data: *const ItdmDataset,
    test_data: *const ItdmDataset,
    out: *mut *mut ItdmRun,
) -> ItdmStatus {
    if config.is_null() {
        return null_pointer("config");
    }
    if train_data.is_null() {
        return null_pointer("train_data");
    }
    if test_data.is_null() {
        return null_pointer("test_data");
    }
    if out.is_null() {
        return null_pointer("out");
    }
    let cfg = &(*config).0;
    let run = match train(cfg, &(*train_data).0, &(*test_data).0) {
        Ok(run) => run,
        Err(e) => return fail(e),
    };
    let summary = match summarize(cfg, &run.records) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    *out = Box::into_raw(Box::new(ItdmRun {
        records: run.records,
        summary,
    }));
    ItdmStatus::Ok
}

/// Number of metric records in a finished run, or -1 if null.
///
/// # Safety
/// `run` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn itdm_run_num_records(run: *const ItdmRun) -> i64 {
    if run.is_null() {
        return -1;
    }
    (*run).records.len() as i64
}

/// The run's metrics stream in the `metrics.csv` format. Caller frees.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for a store.
#[no_mangle]
pub unsafe extern "C" fn itdm_run_metrics_csv(
    run: *const ItdmRun,
    out: *mut *mut c_char,
) -> ItdmStatus {
    if run.is_null() {
        return null_pointer("run");
    }
    if out.is_null() {
        return null_pointer("out");
    }
    give_string(metrics_csv_string(&(*run).records), out)
}

/// The run's summary in the `summary.json` format. Caller frees.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for a store.
#[no_mangle]
pub unsafe extern "C" fn itdm_run_summary_json(
    run: *const ItdmRun,
    out: *mut *mut c_char,
) -> ItdmStatus {
    if run.is_null() {
        return null_pointer("run");
    }
    if out.is_null() {
        return null_pointer("out");
    }
    match serde_json::to_string_pretty(&(*run).summary) {
        Ok(text) => give_string(text, out),
        Err(e) => fail(Error::Json(e)),
    }
}

/// # Safety
/// `run` must be a handle from this library, freed at most once; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn itdm_run_free(run: *mut ItdmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

unsafe fn features_arg(
    ptr: *const f64,
    rows: usize,
    dim: usize,
    what: &str,
) -> Result<Tensor, ItdmStatus> {
    if ptr.is_null() {
        return Err(null_pointer(what));
    }
    let data = std::slice::from_raw_parts(ptr, rows * dim).to_vec();
    Tensor::new(vec![rows, dim], data).map_err(fail)
}

/// Squared biased MMD between two row-major feature matrices under a mixture
/// of Gaussian kernels with explicit bandwidths.
///
/// # Safety
/// `h1` points to `m1 * dim` doubles, `h2` to `m2 * dim`, `sigmas` to
/// `kernels` doubles; `out` must be valid for a store.
#[no_mangle]
pub unsafe extern "C" fn itdm_mmd_sq_biased(
    h1: *const f64,
    m1: usize,
    h2: *const f64,
    m2: usize,
    dim: usize,
    sigmas: *const f64,
    kernels: usize,
    out: *mut f64,
) -> ItdmStatus {
    if sigmas.is_null() {
        return null_pointer("sigmas");
    }
    if out.is_null() {
        return null_pointer("out");
    }
    let t1 = match features_arg(h1, m1, dim, "h1") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let t2 = match features_arg(h2, m2, dim, "h2") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let bank = match KernelBank::from_sigmas(std::slice::from_raw_parts(sigmas, kernels).to_vec()) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match mmd_sq_biased(&t1, &t2, &bank) {
        Ok(v) => {
            *out = v;
            ItdmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Joint matching loss between two feature matrices, with optional gradient
/// output buffers.
///
/// # Safety
/// `h1`/`h2` point to `m1 * dim` / `m2 * dim` doubles. `out_loss` and
/// `out_sigma_med` must be valid for stores. `out_grad_h1`/`out_grad_h2` are
/// either null or buffers of `m1 * dim` / `m2 * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn itdm_match_joint(
    h1: *const f64,
    m1: usize,
    h2: *const f64,
    m2: usize,
    dim: usize,
    kernels: usize,
    use_sqrt: bool,
    out_loss: *mut f64,
    out_sigma_med: *mut f64,
    out_grad_h1: *mut f64,
    out_grad_h2: *mut f64,
) -> ItdmStatus {
    if out_loss.is_null() {
        return null_pointer("out_loss");
    }
    if out_sigma_med.is_null() {
        return null_pointer("out_sigma_med");
    }
    let t1 = match features_arg(h1, m1, dim, "h1") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let t2 = match features_arg(h2, m2, dim, "h2") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let labels1 = vec![0usize; m1];
    let labels2 = vec![0usize; m2];
    let b1 = match FeatureBatch::new(&t1, &labels1) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let b2 = match FeatureBatch::new(&t2, &labels2) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match match_joint(&b1, &b2, kernels, use_sqrt) {
        Ok(result) => {
            *out_loss = result.loss;
            *out_sigma_med = result.sigma_med;
            if !out_grad_h1.is_null() {
                std::slice::from_raw_parts_mut(out_grad_h1, m1 * dim)
                    .copy_from_slice(result.grad_h1.data());
            }
            if !out_grad_h2.is_null() {
                std::slice::from_raw_parts_mut(out_grad_h2, m2 * dim)
                    .copy_from_slice(result.grad_h2.data());
            }
            ItdmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Class-conditional matching loss between two labeled feature matrices.
///
/// # Safety
/// `h1`/`h2` point to `m1 * dim` / `m2 * dim` doubles; `labels1`/`labels2`
/// to `m1` / `m2` uint32 class indices below `num_classes`. The three `out_*`
/// scalars must be valid for stores; gradient buffers are either null or
/// sized like their feature matrix.
#[no_mangle]
pub unsafe extern "C" fn itdm_match_class_conditional(
    h1: *const f64,
    labels1: *const u32,
    m1: usize,
    h2: *const f64,
    labels2: *const u32,
    m2: usize,
    dim: usize,
    num_classes: usize,
    kernels: usize,
    use_sqrt: bool,
    out_loss: *mut f64,
    out_sigma_med: *mut f64,
    out_classes_matched: *mut u32,
    out_grad_h1: *mut f64,
    out_grad_h2: *mut f64,
) -> ItdmStatus {
    if labels1.is_null() {
        return null_pointer("labels1");
    }
    if labels2.is_null() {
        return null_pointer("labels2");
    }
    if out_loss.is_null() {
        return null_pointer("out_loss");
    }
    if out_sigma_med.is_null() {
        return null_pointer("out_sigma_med");
    }
    if out_classes_matched.is_null() {
        return null_pointer("out_classes_matched");
    }
    let t1 = match features_arg(h1, m1, dim, "h1") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let t2 = match features_arg(h2, m2, dim, "h2") {
        Ok(t) => t,
        Err(s) => return s,
    };
    let l1: Vec<usize> = std::slice::from_raw_parts(labels1, m1)
        .iter()
        .map(|&l| l as usize)
        .collect();
    let l2: Vec<usize> = std::slice::from_raw_parts(labels2, m2)
        .iter()
        .map(|&l| l as usize)
        .collect();
    let b1 = match FeatureBatch::new(&t1, &l1) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let b2 = match FeatureBatch::new(&t2, &l2) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match match_class_conditional(&b1, &b2, num_classes, kernels, use_sqrt) {
        Ok(result) => {
            *out_loss = result.loss;
            *out_sigma_med = result.sigma_med;
            *out_classes_matched = result.classes_matched as u32;
            if !out_grad_h1.is_null() {
                std::slice::from_raw_parts_mut(out_grad_h1, m1 * dim)
                    .copy_from_slice(result.grad_h1.data());
            }
            if !out_grad_h2.is_null() {
                std::slice::from_raw_parts_mut(out_grad_h2, m2 * dim)
                    .copy_from_slice(result.grad_h2.data());
            }
            ItdmStatus::Ok
        }
        Err(e) => fail(e),
    }
}
