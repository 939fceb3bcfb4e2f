//! C interface to the hfat toolkit.
//!
//! Every fallible call returns an [`HfatStatus`]; on failure the message is
//! available from [`hfat_last_error`] on the same thread. Models and datasets
//! are opaque handles released with their `_free` function. Strings returned
//! through out-parameters are released with [`hfat_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hfat::autodiff::Tensor;
use hfat::data::{make_dataset, Dataset, DatasetSpec};
use hfat::error::HfatError;
use hfat::eval::{default_suite, evaluate};
use hfat::model::{load_checkpoint, save_checkpoint, Checkpoint, MlpSpec, ModelWeights};
use hfat::trainer::{lambda_from_kls, run_training, RunOptions, TrainConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    IoError = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct HfatModel {
    ckpt: Checkpoint,
}

/// Opaque dataset handle.
pub struct HfatDataset {
    data: Dataset,
    id: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &HfatError) -> HfatStatus {
    match e {
        HfatError::Numeric(_) => HfatStatus::NumericError,
        HfatError::Io { .. } => HfatStatus::IoError,
        HfatError::Parse { .. }
        | HfatError::Format(_)
        | HfatError::UnsupportedVersion { .. }
        | HfatError::Json(_)
        | HfatError::Csv(_)
        | HfatError::InsufficientData { .. } => HfatStatus::DataError,
        _ => HfatStatus::InvalidArgument,
    }
}

enum Failure {
    Status(HfatStatus, String),
    Core(HfatError),
}

impl From<HfatError> for Failure {
    fn from(e: HfatError) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(HfatError::Json(e))
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(HfatStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(HfatStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HfatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HfatStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HfatStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains an interior NUL"))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn hfat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hfat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hfat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_load(path: *const c_char, out: *mut *mut HfatModel) -> HfatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(HfatModel { ckpt }));
        Ok(())
    })
}

/// Freshly initialized MLP with the given layer sizes (input, hidden...,
/// classes).
///
/// # Safety
/// `layer_sizes` must point to `n_layers` readable values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_init(
    layer_sizes: *const usize,
    n_layers: usize,
    seed: u64,
    out: *mut *mut HfatModel,
) -> HfatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if layer_sizes.is_null() {
            return Err(null("layer_sizes"));
        }
        let sizes = std::slice::from_raw_parts(layer_sizes, n_layers).to_vec();
        let weights = ModelWeights::init(&MlpSpec::new(sizes)?, seed)?;
        *out = Box::into_raw(Box::new(HfatModel {
            ckpt: Checkpoint::new(weights, 0, seed),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_save(model: *const HfatModel, path: *const c_char) -> HfatStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&model.ckpt, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_free(model: *mut HfatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_dims(
    model: *const HfatModel,
    input_dim: *mut usize,
    n_classes: *mut usize,
) -> HfatStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(input_dim, "input_dim")? = model.ckpt.spec().input_dim();
        *out_arg(n_classes, "n_classes")? = model.ckpt.spec().n_classes();
        Ok(())
    })
}

/// Predicted class for each of `rows` row-major inputs of width `cols`.
///
/// # Safety
/// `x` must hold `rows * cols` values and `labels` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn hfat_model_predict(
    model: *const HfatModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *mut usize,
) -> HfatStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if x.is_null() {
            return Err(null("x"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let len = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let input = Tensor::new(vec![rows, cols], std::slice::from_raw_parts(x, len).to_vec())?;
        let pred = model.ckpt.weights.predict(&input)?;
        std::slice::from_raw_parts_mut(labels, rows).copy_from_slice(&pred);
        Ok(())
    })
}

/// Generates a dataset from a JSON spec and returns one split
/// (0 = train, 1 = test).
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_dataset_generate(
    spec_json: *const c_char,
    split: u32,
    out: *mut *mut HfatDataset,
) -> HfatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec: DatasetSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let parts = make_dataset(&spec)?;
        let (data, name) = match split {
            0 => (parts.train, "train"),
            1 => (parts.test, "test"),
            s => return Err(invalid(format!("split must be 0 or 1, got {s}"))),
        };
        *out = Box::into_raw(Box::new(HfatDataset {
            data,
            id: format!("{}:{name}", spec.id()),
        }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_dataset_shape(
    dataset: *const HfatDataset,
    rows: *mut usize,
    cols: *mut usize,
) -> HfatStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        *out_arg(rows, "rows")? = d.data.len();
        *out_arg(cols, "cols")? = d.data.dim();
        Ok(())
    })
}

/// Copies inputs (`rows * cols`, row-major) and labels (`rows`) out of a
/// dataset. Either destination may be NULL to skip it.
///
/// # Safety
/// Non-NULL destinations must have room for the full arrays.
#[no_mangle]
pub unsafe extern "C" fn hfat_dataset_copy(dataset: *const HfatDataset, x: *mut f64, labels: *mut usize) -> HfatStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        if !x.is_null() {
            let src = d.data.x.data();
            std::slice::from_raw_parts_mut(x, src.len()).copy_from_slice(src);
        }
        if !labels.is_null() {
            std::slice::from_raw_parts_mut(labels, d.data.len()).copy_from_slice(&d.data.y);
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hfat_dataset_free(dataset: *mut HfatDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Natural and robust accuracy under the standard attack suite at budget
/// `eps`, as an EvalReport JSON string.
///
/// # Safety
/// Handles must be live; `out_json` writable. Free the string with
/// [`hfat_string_free`].
#[no_mangle]
pub unsafe extern "C" fn hfat_evaluate(
    model: *const HfatModel,
    dataset: *const HfatDataset,
    eps: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> HfatStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let id = format!("epoch{}-seed{}", model.ckpt.epoch, model.ckpt.seed);
        let report = evaluate(&model.ckpt, &id, &d.data, &d.id, &default_suite(eps), seed)?;
        *out = into_c_string(serde_json::to_string(&report)?)?;
        Ok(())
    })
}

/// Adaptive branch weights from the two branch KL values.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_adaptive_lambda(
    kl_main: f64,
    kl_aux: f64,
    lambda_s: *mut f64,
    lambda_a: *mut f64,
) -> HfatStatus {
    guard(|| {
        let s = out_arg(lambda_s, "lambda_s")?;
        let a = out_arg(lambda_a, "lambda_a")?;
        let w = lambda_from_kls(kl_main, kl_aux)?;
        *s = w.lambda_S;
        *a = w.lambda_A;
        Ok(())
    })
}

/// Trains from a JSON config into `run_dir` and returns the final model.
/// `out` may be NULL when only the run directory is wanted.
///
/// # Safety
/// Strings must be NUL-terminated; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn hfat_train(
    config_json: *const c_char,
    run_dir: *const c_char,
    out: *mut *mut HfatModel,
) -> HfatStatus {
    guard(|| {
        let cfg: TrainConfig = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        cfg.validate()?;
        let dir = Path::new(str_arg(run_dir, "run_dir")?);
        let data = make_dataset(&cfg.dataset)?.train;
        let summary = run_training(&cfg, &data, dir, RunOptions::default())?;
        if let Some(out) = out.as_mut() {
            let ckpt = Checkpoint::new(summary.state.weights, cfg.epochs as u64, cfg.seed);
            *out = Box::into_raw(Box::new(HfatModel { ckpt }));
        }
        Ok(())
    })
}
