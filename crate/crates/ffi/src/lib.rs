//! C interface to the `causalvqa` library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`CvqaStatus`]; on failure a description is kept per thread and can be
//! read with [`cvqa_last_error`]. Strings returned through out-pointers are
//! owned by the caller and released with [`cvqa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use causalvqa::features::{load_dataset, MomentWindow, SaliencyAnnotation, SyntheticSpec, VideoQAInstance};
use causalvqa::harness::{evaluate, shortcut_probe, train_on, ExperimentConfig};
use causalvqa::intervention::{infonce_loss, ContrastiveTriplet};
use causalvqa::mnse::{BankEntry, MemoryBank, Metric, NeighborQuery, Regime};
use causalvqa::nn::cosine_similarity;
use causalvqa::pcma::PcmaModel;
use causalvqa::samplers::{mar_sample, MarConfig};
use causalvqa::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    DimMismatch = 7,
    NonFinite = 8,
    Bank = 9,
    Diverged = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for CvqaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => CvqaStatus::Io,
            Error::Json { .. } | Error::ByteLength { .. } => CvqaStatus::Format,
            Error::NonFinite { .. } => CvqaStatus::NonFinite,
            Error::DimMismatch { .. } => CvqaStatus::DimMismatch,
            Error::Config(_) => CvqaStatus::Config,
            Error::Regime(_) | Error::InsufficientEntries { .. } | Error::EmptyBank => CvqaStatus::Bank,
            Error::Diverged { .. } => CvqaStatus::Diverged,
            _ => CvqaStatus::InvalidArgument,
        }
    }
}

/// Metric selector for [`cvqa_bank_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvqaMetric {
    Cosine = 0,
    L2 = 1,
}

/// Sampling variant selector for [`cvqa_mar_sample`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvqaMarVariant {
    Mar16 = 0,
    Mar32 = 1,
}

/// A moment window over frame indices `[start, end)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvqaWindow {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Opaque list of question-answer instances.
pub struct CvqaDataset {
    instances: Vec<VideoQAInstance>,
}

/// Opaque trained answer model.
pub struct CvqaModel {
    model: PcmaModel,
}

/// Opaque scene memory bank.
pub struct CvqaBank {
    bank: MemoryBank,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CvqaStatus, msg: impl Into<String>) -> CvqaStatus {
    set_error(msg.into());
    status
}

fn fail_lib(e: Error) -> CvqaStatus {
    let status = CvqaStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into [`CvqaStatus::Panic`].
fn guard(f: impl FnOnce() -> CvqaStatus) -> CvqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == CvqaStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => fail(CvqaStatus::Panic, "internal panic"),
    }
}

macro_rules! try_lib {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return fail_lib(e),
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(CvqaStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// # Safety
/// `s` must be null or a valid nul-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, CvqaStatus> {
    if s.is_null() {
        return Err(fail(CvqaStatus::NullPointer, format!("`{what}` is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(CvqaStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

/// # Safety
/// `p` must be null (only when `n == 0`) or point to `n` readable values.
unsafe fn read_slice<'a, T>(p: *const T, n: usize) -> &'a [T] {
    if n == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, n)
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

fn json_string<T: serde::Serialize>(v: &T) -> Result<*mut c_char, CvqaStatus> {
    serde_json::to_string(v)
        .map(to_c_string)
        .map_err(|e| fail(CvqaStatus::Format, e.to_string()))
}

/// Message of the calling thread's most recent failure, or null after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cvqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cvqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cvqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a dataset from a feature manifest.
///
/// # Safety
/// `manifest_path` must be a valid string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cvqa_dataset_load(manifest_path: *const c_char, out: *mut *mut CvqaDataset) -> CvqaStatus {
    guard(|| {
        non_null!(out);
        let path = match read_str(manifest_path, "manifest_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let instances = try_lib!(load_dataset(Path::new(path)));
        *out = Box::into_raw(Box::new(CvqaDataset { instances }));
        CvqaStatus::Ok
    })
}

/// Generates a synthetic dataset from a JSON generator spec (`"{}"` gives
/// the defaults).
///
/// # Safety
/// `spec_json` must be a valid string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cvqa_dataset_synthetic(spec_json: *const c_char, out: *mut *mut CvqaDataset) -> CvqaStatus {
    guard(|| {
        non_null!(out);
        let text = match read_str(spec_json, "spec_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: SyntheticSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(CvqaStatus::Config, format!("synthetic spec: {e}")),
        };
        let data = try_lib!(causalvqa::features::generate_synthetic(&spec));
        *out = Box::into_raw(Box::new(CvqaDataset {
            instances: data.instances,
        }));
        CvqaStatus::Ok
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_dataset_len(ds: *const CvqaDataset, out: *mut usize) -> CvqaStatus {
    guard(|| {
        non_null!(ds, out);
        *out = (&*ds).instances.len();
        CvqaStatus::Ok
    })
}

/// # Safety
/// `ds` must be null or a dataset handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cvqa_dataset_free(ds: *mut CvqaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on `ds` with an experiment config given as JSON. The config's
/// dataset entry is validated but not loaded; relative paths in it are
/// irrelevant here. Writes the model handle and the training metrics as a
/// JSON string.
///
/// # Safety
/// `config_json` must be a valid string, `ds` a live dataset and both out
/// pointers writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_train(
    config_json: *const c_char,
    ds: *const CvqaDataset,
    out_model: *mut *mut CvqaModel,
    out_metrics_json: *mut *mut c_char,
) -> CvqaStatus {
    guard(|| {
        non_null!(ds, out_model, out_metrics_json);
        let text = match read_str(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = try_lib!(ExperimentConfig::from_json(text).map_err(|e| match e {
            Error::Invalid(m) => Error::Config(vec![causalvqa::FieldError::new("config", m)]),
            other => other,
        }));
        let outcome = try_lib!(train_on(&cfg, &(&*ds).instances));
        let metrics = match json_string(&outcome.train) {
            Ok(m) => m,
            Err(s) => return s,
        };
        *out_metrics_json = metrics;
        *out_model = Box::into_raw(Box::new(CvqaModel { model: outcome.model }));
        CvqaStatus::Ok
    })
}

/// # Safety
/// `path` must be a valid string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_model_load(path: *const c_char, out: *mut *mut CvqaModel) -> CvqaStatus {
    guard(|| {
        non_null!(out);
        let p = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let model = try_lib!(PcmaModel::load(Path::new(p)));
        *out = Box::into_raw(Box::new(CvqaModel { model }));
        CvqaStatus::Ok
    })
}

/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn cvqa_model_save(model: *const CvqaModel, path: *const c_char) -> CvqaStatus {
    guard(|| {
        non_null!(model);
        let p = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        try_lib!((&*model).model.save(Path::new(p)));
        CvqaStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cvqa_model_free(model: *mut CvqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicted answer index of instance `index` of `ds`.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_model_predict(
    model: *const CvqaModel,
    ds: *const CvqaDataset,
    index: usize,
    out: *mut usize,
) -> CvqaStatus {
    guard(|| {
        non_null!(model, ds, out);
        let Some(x) = (&*ds).instances.get(index) else {
            return fail(CvqaStatus::InvalidArgument, format!("instance {index} out of range"));
        };
        *out = try_lib!((&*model).model.predict(x)).predicted;
        CvqaStatus::Ok
    })
}

/// Accuracy report of `model` on `ds` as a JSON string.
///
/// # Safety
/// Both handles must be live and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_evaluate(
    model: *const CvqaModel,
    ds: *const CvqaDataset,
    out_json: *mut *mut c_char,
) -> CvqaStatus {
    guard(|| {
        non_null!(model, ds, out_json);
        let report = try_lib!(evaluate(&(&*model).model, &(&*ds).instances));
        match json_string(&report) {
            Ok(s) => {
                *out_json = s;
                CvqaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Answer-video cosine probe report on `ds` as a JSON string.
///
/// # Safety
/// `ds` must be live and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_probe(ds: *const CvqaDataset, out_json: *mut *mut c_char) -> CvqaStatus {
    guard(|| {
        non_null!(ds, out_json);
        let report = try_lib!(shortcut_probe(&(&*ds).instances));
        match json_string(&report) {
            Ok(s) => {
                *out_json = s;
                CvqaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// An empty, unfrozen static bank of `dim`-wide scenes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_new(dim: usize, metric: CvqaMetric, out: *mut *mut CvqaBank) -> CvqaStatus {
    guard(|| {
        non_null!(out);
        if dim == 0 {
            return fail(CvqaStatus::InvalidArgument, "bank dim must be positive");
        }
        let metric = match metric {
            CvqaMetric::Cosine => Metric::Cosine,
            CvqaMetric::L2 => Metric::L2,
        };
        *out = Box::into_raw(Box::new(CvqaBank {
            bank: MemoryBank::new(dim, metric, Regime::F1Static, 1),
        }));
        CvqaStatus::Ok
    })
}

/// Adds one scene of `dim` values.
///
/// # Safety
/// `bank` must be live, `vector` must point to `dim` values and `video_id`
/// must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_push(
    bank: *mut CvqaBank,
    vector: *const f64,
    dim: usize,
    video_id: *const c_char,
    clip_index: usize,
) -> CvqaStatus {
    guard(|| {
        non_null!(bank, vector);
        let id = match read_str(video_id, "video_id") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let v = read_slice(vector, dim).to_vec();
        try_lib!((&mut *bank).bank.populate([BankEntry::new(v, id, clip_index)]));
        CvqaStatus::Ok
    })
}

/// Adds every clip of every instance of `ds`.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_add_dataset(bank: *mut CvqaBank, ds: *const CvqaDataset) -> CvqaStatus {
    guard(|| {
        non_null!(bank, ds);
        let data = &(&*ds).instances;
        try_lib!((&mut *bank).bank.populate_videos(data.iter().map(|x| (&x.video, x.video_id.as_str()))));
        CvqaStatus::Ok
    })
}

/// Freezes the bank; further pushes fail.
///
/// # Safety
/// `bank` must be live.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_freeze(bank: *mut CvqaBank) -> CvqaStatus {
    guard(|| {
        non_null!(bank);
        (&mut *bank).bank.freeze();
        CvqaStatus::Ok
    })
}

/// # Safety
/// `bank` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_len(bank: *const CvqaBank, out: *mut usize) -> CvqaStatus {
    guard(|| {
        non_null!(bank, out);
        *out = (&*bank).bank.len();
        CvqaStatus::Ok
    })
}

/// # Safety
/// `bank` must be null or a bank handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_free(bank: *mut CvqaBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Exact `k` nearest scenes to `query`, best first. Writes `k` entry
/// indices and scores (cosine similarity, or squared distance for L2).
/// `exclude_video_id` may be null.
///
/// # Safety
/// `bank` must be live, `query` must point to `dim` values, `out_indices`
/// and `out_scores` must each have room for `k` values.
#[no_mangle]
pub unsafe extern "C" fn cvqa_bank_knn(
    bank: *const CvqaBank,
    query: *const f64,
    dim: usize,
    k: usize,
    exclude_video_id: *const c_char,
    out_indices: *mut usize,
    out_scores: *mut f64,
) -> CvqaStatus {
    guard(|| {
        non_null!(bank, query, out_indices, out_scores);
        let exclude = if exclude_video_id.is_null() {
            None
        } else {
            match read_str(exclude_video_id, "exclude_video_id") {
                Ok(s) => Some(s),
                Err(s) => return s,
            }
        };
        let q = NeighborQuery {
            vector: read_slice(query, dim),
            k,
            exclude_video_id: exclude,
        };
        let hits = try_lib!((&*bank).bank.query_knn(&q));
        for (i, h) in hits.iter().enumerate() {
            *out_indices.add(i) = h.index;
            *out_scores.add(i) = h.score;
        }
        CvqaStatus::Ok
    })
}

/// Cosine similarity of two `n`-vectors. When either has zero norm the
/// value is 0 and `out_degenerate` (which may be null) is set to 1.
///
/// # Safety
/// `a` and `b` must point to `n` values, `out` must be writable and
/// `out_degenerate` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_cosine(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
    out_degenerate: *mut u8,
) -> CvqaStatus {
    guard(|| {
        non_null!(a, b, out);
        let c = try_lib!(cosine_similarity(read_slice(a, n), read_slice(b, n)));
        *out = c.value;
        if !out_degenerate.is_null() {
            *out_degenerate = u8::from(c.degenerate);
        }
        CvqaStatus::Ok
    })
}

/// InfoNCE loss of an anchor, a positive and `n_negatives` negatives, all
/// `dim`-wide; `negatives` is row-major `n_negatives × dim`.
///
/// # Safety
/// `anchor` and `positive` must point to `dim` values, `negatives` to
/// `n_negatives * dim` values and `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cvqa_infonce(
    anchor: *const f64,
    positive: *const f64,
    negatives: *const f64,
    n_negatives: usize,
    dim: usize,
    out_loss: *mut f64,
) -> CvqaStatus {
    guard(|| {
        non_null!(anchor, positive, negatives, out_loss);
        let Some(total) = n_negatives.checked_mul(dim) else {
            return fail(CvqaStatus::InvalidArgument, "negatives size overflows");
        };
        let t = ContrastiveTriplet {
            anchor: read_slice(anchor, dim).to_vec(),
            positive: read_slice(positive, dim).to_vec(),
            negatives: read_slice(negatives, total).chunks(dim.max(1)).map(<[f64]>::to_vec).collect(),
        };
        *out_loss = try_lib!(infonce_loss(&t)).loss;
        CvqaStatus::Ok
    })
}

/// Saliency-window frame sampling over `n_frames` frames. Writes the
/// ascending frame indices into `out_indices` (capacity `capacity`) and
/// their number into `out_len`.
///
/// # Safety
/// `windows` must point to `n_windows` entries, `out_indices` to `capacity`
/// writable values and `out_len` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cvqa_mar_sample(
    n_frames: usize,
    windows: *const CvqaWindow,
    n_windows: usize,
    variant: CvqaMarVariant,
    seed: u64,
    out_indices: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CvqaStatus {
    guard(|| {
        non_null!(out_indices, out_len);
        if windows.is_null() && n_windows > 0 {
            return fail(CvqaStatus::NullPointer, "`windows` is null");
        }
        let annotation = SaliencyAnnotation {
            n_frames,
            saliency: vec![0.0; n_frames],
            windows: read_slice(windows, n_windows)
                .iter()
                .map(|w| MomentWindow {
                    start: w.start,
                    end: w.end,
                    score: w.score,
                })
                .collect(),
        };
        let cfg = match variant {
            CvqaMarVariant::Mar16 => MarConfig::mar16(seed),
            CvqaMarVariant::Mar32 => MarConfig::mar32(seed),
        };
        let out = try_lib!(mar_sample(&annotation, &cfg));
        *out_len = out.indices.len();
        if out.indices.len() > capacity {
            return fail(
                CvqaStatus::BufferTooSmall,
                format!("need room for {} indices, got {capacity}", out.indices.len()),
            );
        }
        for (i, &v) in out.indices.iter().enumerate() {
            *out_indices.add(i) = v;
        }
        CvqaStatus::Ok
    })
}
