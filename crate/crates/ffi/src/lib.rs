//! C ABI for stzero.
//!
//! Every function returns an [`StzStatus`]; on failure a message is kept
//! per thread and can be copied out with [`stz_last_error`]. Handles are
//! opaque and owned by the caller, who releases them with the matching
//! `*_free` function. Strings returned through `char **` are released with
//! [`stz_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stzero::data::{synth_dataset, Checkpoint, Dataset, SynthConfig};
use stzero::graph::SlideGraph;
use stzero::train::{
    evaluate_split, predict_columns, train, SplitSelection, TrainConfig, TrainState,
};
use stzero::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StzStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Contract = 4,
    Numeric = 5,
    Data = 6,
    Config = 7,
    Io = 8,
    Corruption = 9,
    Lookup = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Gene split selector for evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StzSplit {
    Seen = 0,
    Unseen = 1,
    All = 2,
}

/// Opaque dataset handle.
pub struct StzDataset(Dataset);

/// Opaque model handle, including optimizer state.
pub struct StzModel(TrainState);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(StzStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension { .. } => StzStatus::Dimension,
            Error::Contract(_) => StzStatus::Contract,
            Error::Numeric(_) => StzStatus::Numeric,
            Error::Data(_)
            | Error::EmptySlide
            | Error::OverlappingSplit(_)
            | Error::Capacity { .. } => StzStatus::Data,
            Error::Config(_) => StzStatus::Config,
            Error::SizeMismatch { .. }
            | Error::MissingFile(_)
            | Error::Io { .. }
            | Error::Json { .. } => StzStatus::Io,
            Error::NonFinitePayload { .. } | Error::Corruption(_) => StzStatus::Corruption,
            Error::Lookup { .. } => StzStatus::Lookup,
        };
        Failure(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(StzStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StzStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (StzStatus::Ok, String::new()),
        Ok(Err(Failure(code, msg))) => (code, msg),
        Err(_) => (StzStatus::Panic, "internal panic".to_string()),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(StzStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(StzStatus::NullArgument, format!("{what} is null")))
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure(StzStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Parses optional JSON; null means the type's defaults.
macro_rules! json_arg {
    ($p:expr, $ty:ty, $what:literal) => {
        if $p.is_null() {
            <$ty>::default()
        } else {
            let text = string_arg($p, $what)?;
            serde_json::from_str::<$ty>(&text)
                .map_err(|e| Failure(StzStatus::Config, format!("{}: {e}", $what)))?
        }
    };
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains NUL"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn stz_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Generates a synthetic dataset. `config_json` holds any subset of the
/// generator fields (`n_slides`, `windows_per_slide`, `n_genes`, `n_seen`,
/// `d_e`, `d_t`, `l`, `d_latent`, `noise_sigma`, `seed`); null uses defaults.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_dataset_synth(
    config_json: *const c_char,
    out: *mut *mut StzDataset,
) -> StzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = json_arg!(config_json, SynthConfig, "config_json");
        let ds = synth_dataset(&cfg)?.dataset;
        *out = Box::into_raw(Box::new(StzDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_dataset_load(
    dir: *const c_char,
    out: *mut *mut StzDataset,
) -> StzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = Dataset::load(&PathBuf::from(string_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(StzDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn stz_dataset_save(ds: *const StzDataset, dir: *const c_char) -> StzStatus {
    guard(|| {
        let ds = non_null(ds, "ds")?;
        ds.0.save(&PathBuf::from(string_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Writes the slide count, the gene count, and the window count of slide
/// `slide` (any output pointer may be null).
///
/// # Safety
/// `ds` must come from this library; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_dataset_shape(
    ds: *const StzDataset,
    slide: usize,
    n_slides: *mut usize,
    n_genes: *mut usize,
    n_windows: *mut usize,
) -> StzStatus {
    guard(|| {
        let ds = &non_null(ds, "ds")?.0;
        let s = ds.slides.get(slide).ok_or_else(|| {
            Failure(
                StzStatus::Lookup,
                format!("slide index {slide} out of range"),
            )
        })?;
        if let Some(p) = n_slides.as_mut() {
            *p = ds.slides.len();
        }
        if let Some(p) = n_genes.as_mut() {
            *p = ds.n_genes();
        }
        if let Some(p) = n_windows.as_mut() {
            *p = s.n();
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stz_dataset_free(ds: *mut StzDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a fresh model. `config_json` holds any subset of the training
/// configuration fields; null uses defaults.
///
/// # Safety
/// `ds` must come from this library; `config_json` must be null or a
/// NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_model_train(
    ds: *const StzDataset,
    config_json: *const c_char,
    out: *mut *mut StzModel,
) -> StzStatus {
    guard(|| {
        let ds = &non_null(ds, "ds")?.0;
        let out = out_ptr(out, "out")?;
        let cfg = json_arg!(config_json, TrainConfig, "config_json");
        let (state, _) = train(ds, &cfg)?;
        *out = Box::into_raw(Box::new(StzModel(state)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_model_load(path: *const c_char, out: *mut *mut StzModel) -> StzStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let state = Checkpoint::load(&PathBuf::from(string_arg(path, "path")?))?.to_state()?;
        *out = Box::into_raw(Box::new(StzModel(state)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn stz_model_save(model: *const StzModel, path: *const c_char) -> StzStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        Checkpoint::from_state(&model.0).save(&PathBuf::from(string_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stz_model_free(model: *mut StzModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates on a split and returns the report as a JSON string, released
/// with [`stz_string_free`].
///
/// # Safety
/// Handles must come from this library; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stz_model_eval(
    model: *const StzModel,
    ds: *const StzDataset,
    split: StzSplit,
    out_json: *mut *mut c_char,
) -> StzStatus {
    guard(|| {
        let state = &non_null(model, "model")?.0;
        let ds = &non_null(ds, "ds")?.0;
        let out = out_ptr(out_json, "out_json")?;
        let split = match split {
            StzSplit::Seen => SplitSelection::Seen,
            StzSplit::Unseen => SplitSelection::Unseen,
            StzSplit::All => SplitSelection::All,
        };
        let report = evaluate_split(&state.model, ds, state.config.graph(), split)?;
        *out = c_string(serde_json::to_string(&report).expect("report serializes"))?;
        Ok(())
    })
}

/// Writes predictions for gene index `gene` on slide index `slide` into
/// `out[0..n_windows]`. Fails with `BufferTooSmall` if `len < n_windows`.
///
/// # Safety
/// Handles must come from this library; `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn stz_model_predict(
    model: *const StzModel,
    ds: *const StzDataset,
    slide: usize,
    gene: usize,
    out: *mut f64,
    len: usize,
) -> StzStatus {
    guard(|| {
        let state = &non_null(model, "model")?.0;
        let ds = &non_null(ds, "ds")?.0;
        if out.is_null() {
            return Err(Failure(StzStatus::NullArgument, "out is null".into()));
        }
        let s = ds.slides.get(slide).ok_or_else(|| {
            Failure(
                StzStatus::Lookup,
                format!("slide index {slide} out of range"),
            )
        })?;
        if gene >= ds.n_genes() {
            return Err(Failure(
                StzStatus::Lookup,
                format!("gene index {gene} out of range"),
            ));
        }
        if len < s.n() {
            return Err(Failure(
                StzStatus::BufferTooSmall,
                format!("buffer holds {len} values, slide has {}", s.n()),
            ));
        }
        let graph = SlideGraph::build(&s.positions, &s.features, state.config.graph())?;
        let single = Dataset {
            slides: vec![s.clone()],
            ..ds.clone()
        };
        let pred = predict_columns(&state.model, &single, &[graph], &[gene])?.remove(0);
        std::slice::from_raw_parts_mut(out, s.n()).copy_from_slice(pred.data());
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stz_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
