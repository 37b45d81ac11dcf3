//! C ABI over the `calonet` library.
//!
//! Objects cross the boundary as opaque pointers created by a
//! `calonet_*_load`/`_build`/`_train` call and released by the matching
//! `_free`. Every fallible function returns a [`CalonetStatus`]; on
//! failure, `calonet_last_error()` describes the problem for the calling
//! thread. Strings returned by the library must be released with
//! `calonet_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use calonet::causal::{
    build_causal_matrix, export, transfer_entropy, BinStrategy, BinningSpec, CausalConfig, CausalMatrix,
    GraphFormat, HistoryOrder,
};
use calonet::dataset::{load, parse_ts, Dataset, NormalizationStats, ParseOptions};
use calonet::encoder::EncoderConfig;
use calonet::gnn::GinConfig;
use calonet::model::{evaluate, train, CaLoNetModel, TrainConfig};
use calonet::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalonetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Config = 5,
    Shape = 6,
    Version = 7,
    Corrupt = 8,
    Runtime = 9,
    Panic = 10,
}

/// Graph export formats.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalonetGraphFormat {
    Dot = 0,
    Json = 1,
}

/// Parsed dataset.
pub struct CalonetDataset(Dataset);

/// Thresholded causal matrix of one sample.
pub struct CalonetCausalMatrix(CausalMatrix);

/// Trained or loaded classifier.
pub struct CalonetModel(CaLoNetModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CalonetStatus {
    match e {
        Error::Parse { .. } | Error::Record { .. } | Error::UnknownLabel { .. } | Error::Csv(_) => {
            CalonetStatus::Parse
        }
        Error::Config(_) => CalonetStatus::Config,
        Error::Shape { .. } => CalonetStatus::Shape,
        Error::InvalidArgument(_) => CalonetStatus::InvalidArgument,
        Error::Version { .. } => CalonetStatus::Version,
        Error::Corrupt(_) | Error::Json(_) => CalonetStatus::Corrupt,
        Error::Io { .. } => CalonetStatus::Io,
        _ => CalonetStatus::Runtime,
    }
}

struct Fail(CalonetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CalonetStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CalonetStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CalonetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CalonetStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            CalonetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

fn causal_config(threshold: f64, n_bins: usize, k: usize, l: usize) -> Result<CausalConfig, Fail> {
    let cfg = CausalConfig {
        binning: BinningSpec::new(n_bins, BinStrategy::EqualFrequency)?,
        order: HistoryOrder::new(k, l)?,
        threshold,
        ..CausalConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn calonet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn calonet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn calonet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a `.ts` or `.csv` dataset with default parse options.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_load(path: *const c_char, out: *mut *mut CalonetDataset) -> CalonetStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let ds = load(&path, &ParseOptions::default())?;
        put(out, boxed(CalonetDataset(ds)))
    })
}

/// Parses `.ts` text held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_parse_ts(text: *const c_char, out: *mut *mut CalonetDataset) -> CalonetStatus {
    guard(|| {
        let ds = parse_ts(str_arg(text, "text")?)?;
        put(out, boxed(CalonetDataset(ds)))
    })
}

/// # Safety
/// `ds` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_free(ds: *mut CalonetDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples, dimensions, series length and classes.
///
/// # Safety
/// `ds` must be a live dataset handle; every output pointer must be
/// writable or null (null outputs are skipped).
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_shape(
    ds: *const CalonetDataset,
    n_samples: *mut usize,
    n_dims: *mut usize,
    length: *mut usize,
    n_classes: *mut usize,
) -> CalonetStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        for (p, v) in [(n_samples, ds.len()), (n_dims, ds.n_dims), (length, ds.length), (n_classes, ds.n_classes)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Label index of one sample.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_label(ds: *const CalonetDataset, sample: usize, out: *mut usize) -> CalonetStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let s = ds
            .samples
            .get(sample)
            .ok_or_else(|| invalid(format!("sample {sample} out of range")))?;
        put(out, s.label)
    })
}

/// Copies one sample, row-major `[n_dims][length]`, into `buf`.
///
/// # Safety
/// `ds` must be a live dataset handle; `buf` must hold `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn calonet_dataset_sample(
    ds: *const CalonetDataset,
    sample: usize,
    buf: *mut f64,
    buf_len: usize,
) -> CalonetStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let s = ds
            .samples
            .get(sample)
            .ok_or_else(|| invalid(format!("sample {sample} out of range")))?;
        let need = ds.n_dims * ds.length;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if buf_len < need {
            return Err(invalid(format!("buffer holds {buf_len} values, {need} needed")));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (chunk, row) in dst.chunks_mut(ds.length.max(1)).zip(&s.values) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Transfer entropy in bits from `source` to `target` with equal-frequency
/// binning.
///
/// # Safety
/// `source` and `target` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_transfer_entropy(
    source: *const f64,
    target: *const f64,
    len: usize,
    n_bins: usize,
    k: usize,
    l: usize,
    out: *mut f64,
) -> CalonetStatus {
    guard(|| {
        if source.is_null() || target.is_null() {
            return Err(null("series"));
        }
        let x = std::slice::from_raw_parts(source, len);
        let y = std::slice::from_raw_parts(target, len);
        let cfg = causal_config(0.0, n_bins, k, l)?;
        put(out, transfer_entropy(x, y, &cfg.order, &cfg.binning)?)
    })
}

/// Causal matrix of one sample of a dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_causal_matrix_build(
    ds: *const CalonetDataset,
    sample: usize,
    threshold: f64,
    n_bins: usize,
    k: usize,
    l: usize,
    out: *mut *mut CalonetCausalMatrix,
) -> CalonetStatus {
    guard(|| {
        let ds = &obj(ds, "dataset")?.0;
        let s = ds
            .samples
            .get(sample)
            .ok_or_else(|| invalid(format!("sample {sample} out of range")))?;
        let cfg = causal_config(threshold, n_bins, k, l)?;
        let m = build_causal_matrix(s, cfg.threshold, &cfg.order, &cfg.binning)?;
        put(out, boxed(CalonetCausalMatrix(m)))
    })
}

/// # Safety
/// `m` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn calonet_causal_matrix_free(m: *mut CalonetCausalMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of nodes.
///
/// # Safety
/// `m` must be a live matrix handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_causal_matrix_size(m: *const CalonetCausalMatrix, out: *mut usize) -> CalonetStatus {
    guard(|| put(out, obj(m, "matrix")?.0.n()))
}

/// Entry `(i, j)`: the score of edge `i -> j`, or 0 when there is none.
///
/// # Safety
/// `m` must be a live matrix handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_causal_matrix_get(
    m: *const CalonetCausalMatrix,
    i: usize,
    j: usize,
    out: *mut f64,
) -> CalonetStatus {
    guard(|| {
        let m = &obj(m, "matrix")?.0;
        if i >= m.n() || j >= m.n() {
            return Err(invalid(format!("index ({i}, {j}) outside a {0}x{0} matrix", m.n())));
        }
        put(out, m.get(i, j))
    })
}

/// DOT or JSON text of the matrix; release with `calonet_string_free`.
///
/// # Safety
/// `m` must be a live matrix handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_causal_matrix_export(
    m: *const CalonetCausalMatrix,
    format: CalonetGraphFormat,
    out: *mut *mut c_char,
) -> CalonetStatus {
    guard(|| {
        let m = &obj(m, "matrix")?.0;
        let fmt = match format {
            CalonetGraphFormat::Dot => GraphFormat::Dot,
            CalonetGraphFormat::Json => GraphFormat::Json,
        };
        let text = CString::new(export(m, fmt)?).map_err(|e| Fail(CalonetStatus::Runtime, e.to_string()))?;
        put(out, text.into_raw())
    })
}

/// Trains a model with default architecture. Inputs are z-normalized with
/// training statistics when `normalize` is non-zero.
///
/// # Safety
/// `train_set` and `test_set` must be live dataset handles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_train(
    train_set: *const CalonetDataset,
    test_set: *const CalonetDataset,
    epochs: usize,
    seed: u64,
    normalize: i32,
    out: *mut *mut CalonetModel,
) -> CalonetStatus {
    guard(|| {
        let tr = &obj(train_set, "train_set")?.0;
        let te = obj(test_set, "test_set")?.0.align_labels(&tr.class_names)?;
        let stats = if normalize != 0 { Some(NormalizationStats::fit(tr)?) } else { None };
        let (tr_n, te_n) = match &stats {
            Some(s) => (s.apply(tr), s.apply(&te)),
            None => (tr.clone(), te),
        };
        let cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (mut model, _) = train(&tr_n, &te_n, &EncoderConfig::default(), &GinConfig::default(), &cfg)?;
        model.set_normalization(stats);
        put(out, boxed(CalonetModel(model)))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_load(path: *const c_char, out: *mut *mut CalonetModel) -> CalonetStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, boxed(CalonetModel(CaLoNetModel::load(&path)?)))
    })
}

/// # Safety
/// `model` must be a live model handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_save(model: *const CalonetModel, path: *const c_char) -> CalonetStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(model.save(&path)?)
    })
}

/// # Safety
/// `model` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_free(model: *mut CalonetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn prepared(model: &CaLoNetModel, ds: &Dataset) -> Result<Dataset, Fail> {
    let cfg = model.config();
    let ds = if cfg.class_names.is_empty() {
        ds.clone()
    } else {
        ds.align_labels(&cfg.class_names)?
    };
    cfg.check_dataset(&ds)?;
    Ok(model.prepare(&ds))
}

/// Predicted class of one raw sample.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_predict(
    model: *const CalonetModel,
    ds: *const CalonetDataset,
    sample: usize,
    out: *mut usize,
) -> CalonetStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let ds = &obj(ds, "dataset")?.0;
        if sample >= ds.len() {
            return Err(invalid(format!("sample {sample} out of range")));
        }
        let ds = prepared(model, &ds.subset(&[sample]))?;
        let s = &ds.samples[0];
        let m = model.causal_matrix(s)?;
        put(out, model.predict(s, &m)?)
    })
}

/// Accuracy of the model on a raw dataset.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn calonet_model_evaluate(
    model: *const CalonetModel,
    ds: *const CalonetDataset,
    out: *mut f64,
) -> CalonetStatus {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let ds = prepared(model, &obj(ds, "dataset")?.0)?;
        put(out, evaluate(model, &ds, 1)?.accuracy)
    })
}
