//! C ABI over the `paircfr` core.
//!
//! Handles are opaque and owned by the caller; each `*_new`/`*_generate`/
//! `*_load`/`*_train` result must be released with the matching `*_free`.
//! Every entry point returns a [`PcfrStatus`]; on failure the message is
//! kept per thread and can be copied out with [`pcfr_last_error`].
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use paircfr::closed_form::empirical_weights;
use paircfr::eval::evaluate;
use paircfr::feature_model::{generate_paircad, BlockLayout, EditMode, FeatureModelSpec, PairedDataset};
use paircfr::linalg::Matrix;
use paircfr::losses::{ce_loss_and_grad, cl_loss_and_grad, EmbeddingBatch, LossConfig, NoPositivePolicy, Similarity};
use paircfr::model::{init_model, Init, LinearModel};
use paircfr::stats::paired_ttest;
use paircfr::trainer::{train, TrainConfig};
use paircfr::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcfrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Degenerate = 5,
    Io = 6,
    Parse = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Synthetic dataset of originals and their counterfactuals.
pub struct PcfrDataset(PairedDataset);

/// Linear encoder and softmax head.
pub struct PcfrModel(LinearModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcfrEditMode {
    ExactOpposite = 0,
    Resample = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcfrSimilarity {
    Cosine = 0,
    Dot = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcfrNoPositivePolicy {
    RepulsionOnly = 0,
    SkipAnchor = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> PcfrStatus {
    match e {
        Error::InvalidSpec(_) | Error::InvalidArgument { .. } | Error::NotFound(_) | Error::Undefined(_) => {
            PcfrStatus::InvalidArgument
        }
        Error::Shape(_) => PcfrStatus::Shape,
        Error::Singular { .. } | Error::NonFinite { .. } => PcfrStatus::Numeric,
        Error::ExactTie | Error::ConstantDifference(_) => PcfrStatus::Degenerate,
        Error::Io { .. } => PcfrStatus::Io,
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => PcfrStatus::Parse,
    }
}

struct Fail(PcfrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PcfrStatus::NullPointer, format!("{what} is null"))
}

fn guard<F>(f: F) -> PcfrStatus
where
    F: FnOnce() -> Result<(), Fail>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PcfrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PcfrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PcfrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` plus a terminating NUL into `buf`; `needed` receives the
/// required size including the NUL.
unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Fail> {
    if !needed.is_null() {
        *needed = s.len() + 1;
    }
    if len < s.len() + 1 {
        return Err(Fail(PcfrStatus::BufferTooSmall, format!("buffer holds {len} bytes, {} needed", s.len() + 1)));
    }
    let out = slice_out(buf as *mut u8, len, "buf")?;
    out[..s.len()].copy_from_slice(s.as_bytes());
    out[s.len()] = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcfr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies this thread's last error message (empty after a successful call).
///
/// # Safety
/// `buf` must point to `len` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pcfr_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> PcfrStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_str(&msg, buf, len, needed) {
        Ok(()) => PcfrStatus::Ok,
        Err(Fail(s, _)) => s,
    }
}

/// Samples `n_pairs` originals with `k` counterfactuals each. `spec_json`
/// is a JSON feature-model spec, or null for the canonical benchmark.
///
/// # Safety
/// `spec_json` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_generate(
    spec_json: *const c_char,
    n_pairs: usize,
    k: usize,
    edit_mode: PcfrEditMode,
    seed: u64,
    out: *mut *mut PcfrDataset,
) -> PcfrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = if spec_json.is_null() {
            FeatureModelSpec::canonical()
        } else {
            serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(Error::from)?
        };
        let mode = match edit_mode {
            PcfrEditMode::ExactOpposite => EditMode::ExactOpposite,
            PcfrEditMode::Resample => EditMode::Resample,
        };
        let ds = generate_paircad(&spec, n_pairs, k, mode, seed)?;
        *out = Box::into_raw(Box::new(PcfrDataset(ds)));
        Ok(())
    })
}

/// Loads a dataset TSV and its JSON sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_load(path: *const c_char, out: *mut *mut PcfrDataset) -> PcfrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        *out = Box::into_raw(Box::new(PcfrDataset(PairedDataset::load(&path)?)));
        Ok(())
    })
}

/// Writes the dataset TSV and its sidecar.
///
/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_save(ds: *const PcfrDataset, path: *const c_char) -> PcfrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        ds.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Sample count and feature dimension.
///
/// # Safety
/// `ds` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_shape(ds: *const PcfrDataset, n_samples: *mut usize, dim: *mut usize) -> PcfrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if let Some(n) = n_samples.as_mut() {
            *n = ds.0.len();
        }
        if let Some(d) = dim.as_mut() {
            *d = ds.0.layout().total();
        }
        Ok(())
    })
}

/// Hex SHA-256 of the dataset content.
///
/// # Safety
/// `ds` must be a live handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_content_hash(
    ds: *const PcfrDataset,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> PcfrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        copy_str(&ds.0.content_hash(), buf, len, needed)
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcfr_dataset_free(ds: *mut PcfrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Ridge-regularized least-squares weights of `±1` labels on the features
/// of a synthetic dataset; the first `dim` entries of `w` are written.
///
/// # Safety
/// `ds` must be a live handle; `w` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pcfr_closed_form_weights(ds: *const PcfrDataset, ridge: f64, w: *mut f64, len: usize) -> PcfrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        let spec = ds
            .0
            .spec()
            .ok_or_else(|| Fail(PcfrStatus::InvalidArgument, "dataset has no generating spec".into()))?;
        let rep = empirical_weights(&ds.0, spec, ridge)?;
        if len < rep.w.len() {
            return Err(Fail(PcfrStatus::BufferTooSmall, format!("w holds {len} values, {} needed", rep.w.len())));
        }
        slice_out(w, len, "w")?[..rep.w.len()].copy_from_slice(&rep.w);
        Ok(())
    })
}

/// Encoder `(r1 + r2 + s) × embed_dim` and head `embed_dim × classes`,
/// initialized from `N(0, init_std²)`, or zeros when `init_std` is 0.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_model_new(
    dim_r1: usize,
    dim_r2: usize,
    dim_s: usize,
    embed_dim: usize,
    classes: usize,
    init_std: f64,
    seed: u64,
    out: *mut *mut PcfrModel,
) -> PcfrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let layout = BlockLayout::new(dim_r1, dim_r2, dim_s)?;
        let init = if init_std == 0.0 {
            Init::Zeros
        } else {
            Init::ScaledNormal { std: init_std }
        };
        *out = Box::into_raw(Box::new(PcfrModel(init_model(layout, embed_dim, classes, init, seed)?)));
        Ok(())
    })
}

/// Trains a copy of `model`; `out` receives the selected model. A null
/// `config_json` means default training settings.
///
/// # Safety
/// Handles must be live; `config_json` null or NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_model_train(
    model: *const PcfrModel,
    train_set: *const PcfrDataset,
    valid_set: *const PcfrDataset,
    config_json: *const c_char,
    out: *mut *mut PcfrModel,
) -> PcfrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let tr = train_set.as_ref().ok_or_else(|| null("train_set"))?;
        let va = valid_set.as_ref().ok_or_else(|| null("valid_set"))?;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        let (best, _) = train(&model.0, &tr.0, &va.0, &cfg)?;
        *out = Box::into_raw(Box::new(PcfrModel(best)));
        Ok(())
    })
}

/// Accuracy of argmax predictions on `ds`.
///
/// # Safety
/// Handles must be live; `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_model_evaluate(model: *const PcfrModel, ds: *const PcfrDataset, accuracy: *mut f64) -> PcfrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        *out_arg(accuracy, "accuracy")? = evaluate(&model.0, &ds.0)?;
        Ok(())
    })
}

/// Copies the flattened parameters (encoder, head, bias) into `params`.
/// With a null `params`, only `count` is written.
///
/// # Safety
/// `model` must be live; `params` null or `len` doubles; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_model_params(model: *const PcfrModel, params: *mut f64, len: usize, count: *mut usize) -> PcfrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let p = model.0.params();
        *out_arg(count, "count")? = p.len();
        if params.is_null() {
            return Ok(());
        }
        if len < p.len() {
            return Err(Fail(PcfrStatus::BufferTooSmall, format!("params holds {len} values, {} needed", p.len())));
        }
        slice_out(params, p.len(), "params")?.copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcfr_model_free(model: *mut PcfrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean softmax cross-entropy of row-major `n × k` logits; `grad`
/// receives `∂L/∂logits` (`n × k`).
///
/// # Safety
/// Arrays must hold the stated number of elements; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_ce_loss(
    logits: *const f64,
    n: usize,
    k: usize,
    labels: *const usize,
    loss: *mut f64,
    grad: *mut f64,
) -> PcfrStatus {
    guard(|| {
        let logits = Matrix::from_vec(n, k, slice_arg(logits, n * k, "logits")?.to_vec())?;
        let labels = slice_arg(labels, n, "labels")?;
        let (l, g) = ce_loss_and_grad(&logits, labels)?;
        *out_arg(loss, "loss")? = l;
        slice_out(grad, n * k, "grad")?.copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Supervised contrastive loss of row-major `n × d` embeddings; `grad`
/// receives `∂L/∂z` (`n × d`).
///
/// # Safety
/// Arrays must hold the stated number of elements; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_cl_loss(
    z: *const f64,
    n: usize,
    d: usize,
    labels: *const usize,
    tau: f64,
    similarity: PcfrSimilarity,
    policy: PcfrNoPositivePolicy,
    neutral_excluded: bool,
    loss: *mut f64,
    grad: *mut f64,
) -> PcfrStatus {
    guard(|| {
        let batch = EmbeddingBatch {
            z: Matrix::from_vec(n, d, slice_arg(z, n * d, "z")?.to_vec())?,
            labels: slice_arg(labels, n, "labels")?.to_vec(),
        };
        let cfg = LossConfig {
            lambda: 1.0,
            tau,
            similarity: match similarity {
                PcfrSimilarity::Cosine => Similarity::Cosine,
                PcfrSimilarity::Dot => Similarity::Dot,
            },
            neutral_excluded,
            no_positive_policy: match policy {
                PcfrNoPositivePolicy::RepulsionOnly => NoPositivePolicy::RepulsionOnly,
                PcfrNoPositivePolicy::SkipAnchor => NoPositivePolicy::SkipAnchor,
            },
        };
        cfg.validate()?;
        let (l, g) = cl_loss_and_grad(&batch, &cfg)?;
        *out_arg(loss, "loss")? = l;
        slice_out(grad, n * d, "grad")?.copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Two-sided paired t-test of `a − b`.
///
/// # Safety
/// `a` and `b` must hold `n` doubles; `t` and `p` writable.
#[no_mangle]
pub unsafe extern "C" fn pcfr_paired_ttest(a: *const f64, b: *const f64, n: usize, t: *mut f64, p: *mut f64) -> PcfrStatus {
    guard(|| {
        let r = paired_ttest(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        *out_arg(t, "t")? = r.t;
        *out_arg(p, "p")? = r.p;
        Ok(())
    })
}
