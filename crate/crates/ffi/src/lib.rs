//! C interface to `ovseg`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an
//! [`OvsegStatus`]; on failure a message is kept per thread and can be read
//! with [`ovseg_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ovseg::analysis::linear_cka;
use ovseg::analysis::spectrum::map_ratio;
use ovseg::io::{load_checkpoint, read_tensor, save_checkpoint, write_tensor, Dataset, SyntheticSpec};
use ovseg::train::{eval_miou, restore, train, DecoderInput, ModelConfig, ModelParams, TrainConfig};
use ovseg::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OvsegStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8, or a value was out of range.
    InvalidArgument = 2,
    /// Bad configuration, shapes or input data.
    UserError = 3,
    /// I/O, numeric or format failure.
    RuntimeError = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// Dataset split selector, passed as `uint32_t`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub enum OvsegSplit {
    Train = 0,
    Eval = 1,
}

pub struct OvsegTensor(Tensor);

pub struct OvsegDataset(Dataset);

pub struct OvsegModel {
    train: TrainConfig,
    model_config: ModelConfig,
    params: ModelParams,
    checkpoint: ovseg::io::Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(OvsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_user_error() {
            OvsegStatus::UserError
        } else {
            OvsegStatus::RuntimeError
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OvsegStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(OvsegStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OvsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OvsegStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            OvsegStatus::Panic
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

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn split_of(d: &Dataset, split: u32) -> Result<&[ovseg::io::SceneSample], Failure> {
    match split {
        s if s == OvsegSplit::Train as u32 => Ok(&d.train),
        s if s == OvsegSplit::Eval as u32 => Ok(&d.eval),
        s => Err(invalid(format!("unknown split {s}"))),
    }
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ovseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `len` values of shape `shape[0..rank]` into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut OvsegTensor,
) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if (shape.is_null() && rank > 0) || (data.is_null() && len > 0) {
            return Err(null("shape or data"));
        }
        let shape = if rank == 0 { &[][..] } else { std::slice::from_raw_parts(shape, rank) };
        let data = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        *out = Box::into_raw(Box::new(OvsegTensor(Tensor::new(shape, data)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_read(path: *const c_char, out: *mut *mut OvsegTensor) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = read_tensor(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(OvsegTensor(t)));
        Ok(())
    })
}

/// # Safety
/// `t` must be a live tensor handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_write(t: *const OvsegTensor, path: *const c_char) -> OvsegStatus {
    guard(|| {
        let t = handle(t, "tensor")?;
        write_tensor(path_arg(path, "path")?, &t.0)?;
        Ok(())
    })
}

/// Rank of `t`, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_rank(t: *const OvsegTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Extents of `t`, or null for a null handle. Valid while `t` lives.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_shape(t: *const OvsegTensor) -> *const usize {
    t.as_ref().map_or(ptr::null(), |t| t.0.shape().as_ptr())
}

/// Element count of `t`, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_len(t: *const OvsegTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.data().len())
}

/// Row-major values of `t`, or null for a null handle. Valid while `t` lives.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_data(t: *const OvsegTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ovseg_tensor_free(t: *mut OvsegTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Linear CKA between two `[N, D]` sample matrices.
///
/// # Safety
/// `x` and `y` must be live tensor handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_linear_cka(x: *const OvsegTensor, y: *const OvsegTensor, out: *mut f64) -> OvsegStatus {
    guard(|| {
        let (x, y) = (handle(x, "x")?, handle(y, "y")?);
        *out_ptr(out, "out")? = linear_cka(&x.0, &y.0)?;
        Ok(())
    })
}

/// High/low frequency log-ratio of a `[C, H, W]` map with default bins.
///
/// # Safety
/// `map` must be a live tensor handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_frequency_ratio(map: *const OvsegTensor, r_c: f64, out: *mut f64) -> OvsegStatus {
    guard(|| {
        let map = handle(map, "map")?;
        *out_ptr(out, "out")? = map_ratio(&map.0, r_c)?;
        Ok(())
    })
}

/// Synthetic dataset with default settings and the given seed.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_dataset_generate(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    out: *mut *mut OvsegDataset,
) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        *out = Box::into_raw(Box::new(OvsegDataset(Dataset::generate(&spec, n_train, n_eval)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_dataset_load(path: *const c_char, out: *mut *mut OvsegDataset) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d = Dataset::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(OvsegDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `d` must be a live dataset handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ovseg_dataset_save(d: *const OvsegDataset, path: *const c_char) -> OvsegStatus {
    guard(|| {
        let d = handle(d, "dataset")?;
        d.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Scene count of a split; 0 for a null handle or unknown split.
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ovseg_dataset_len(d: *const OvsegDataset, split: u32) -> usize {
    d.as_ref()
        .and_then(|d| split_of(&d.0, split).ok())
        .map_or(0, <[_]>::len)
}

/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ovseg_dataset_free(d: *mut OvsegDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Trains on the dataset's train split. `config_json` holds training
/// settings overlaid on the defaults (`"{}"` or null for none).
///
/// # Safety
/// `d` must be a live dataset handle, `config_json` null or a nul-terminated
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_train(
    d: *const OvsegDataset,
    config_json: *const c_char,
    out: *mut *mut OvsegModel,
) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d = handle(d, "dataset")?;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure::from(Error::Config(e.to_string())))?
        };
        let t = train(&cfg, &d.0, None)?;
        *out = Box::into_raw(Box::new(OvsegModel {
            train: t.config,
            model_config: t.model_config,
            params: t.model,
            checkpoint: t.checkpoint,
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_model_load(path: *const c_char, out: *mut *mut OvsegModel) -> OvsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let checkpoint = load_checkpoint(path_arg(path, "path")?)?;
        let (train, model_config, params) = restore(&checkpoint)?;
        *out = Box::into_raw(Box::new(OvsegModel {
            train,
            model_config,
            params,
            checkpoint,
        }));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live model handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ovseg_model_save(m: *const OvsegModel, path: *const c_char) -> OvsegStatus {
    guard(|| {
        let m = handle(m, "model")?;
        save_checkpoint(path_arg(path, "path")?, &m.checkpoint)?;
        Ok(())
    })
}

/// mIoU of the model on one split.
///
/// # Safety
/// `m` and `d` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ovseg_model_eval(
    m: *const OvsegModel,
    d: *const OvsegDataset,
    split: u32,
    out: *mut f64,
) -> OvsegStatus {
    guard(|| {
        let (m, d) = (handle(m, "model")?, handle(d, "dataset")?);
        let out = out_ptr(out, "out")?;
        let samples = split_of(&d.0, split)?;
        let expected = m.model_config.embed_dim;
        if d.0.bank.dim() != expected {
            return Err(Error::Config(format!(
                "model expects {expected}-dim text embeddings, dataset has {}",
                d.0.bank.dim()
            ))
            .into());
        }
        *out = eval_miou(samples, &m.params, &d.0.bank, &m.train, DecoderInput::Encoded)?.miou;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ovseg_model_free(m: *mut OvsegModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
