//! C ABI for the `superweight` crate.
//!
//! Every entry point returns an [`SwnStatus`]; on failure the message is kept
//! per thread and read with [`swn_last_error_message`]. Models are opaque
//! handles owned by the caller and released with [`swn_model_free`]; strings
//! returned by the library are released with [`swn_string_free`]. No call
//! unwinds across the boundary: panics map to `SWN_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use superweight::ensemble::{average_probs, FrozenMember, SwnModel};
use superweight::harness::{load_config, run_and_emit};
use superweight::metrics::ece;
use superweight::numerics::{DenseArray, Precision, Scalar};
use superweight::search::{group_by_queue, SimilarityQueue};
use superweight::weightgen::{checkpoint_precision, Checkpoint, LayerId};
use superweight::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    BudgetTooSmall = 7,
    Shape = 8,
    Numeric = 9,
    Failed = 10,
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SwnStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Io { .. } => SwnStatus::Io,
        Error::Checkpoint(_) => SwnStatus::Checkpoint,
        Error::Config { .. } | Error::InvalidMode(_) | Error::Json(_) => SwnStatus::Config,
        Error::BudgetTooSmall { .. } => SwnStatus::BudgetTooSmall,
        Error::Shape { .. } | Error::LabelOutOfRange { .. } => SwnStatus::Shape,
        Error::NonFinite(_) => SwnStatus::Numeric,
        _ => SwnStatus::Failed,
    }
}

struct Failure(SwnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(SwnStatus::InvalidArgument, message.into())
}

/// Runs `body`, records any failure and converts it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SwnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SwnStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            SwnStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a valid pointer per the C contract.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(SwnStatus::NullPointer, format!("`{name}` is null")))
}

fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    // SAFETY: non-null and the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    non_null(p as *const T, name)?;
    // SAFETY: non-null and the caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    non_null(out as *const T, name)?;
    // SAFETY: non-null, caller-owned and properly aligned.
    unsafe { out.write(value) };
    Ok(())
}

fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    // SAFETY: non-null, nul-terminated per the C contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(SwnStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn swn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

enum Members {
    F32(Vec<FrozenMember<f32>>),
    F64(Vec<FrozenMember<f64>>),
}

/// Trained ensemble with materialized member weights.
pub struct SwnModelHandle {
    members: Members,
    input_features: usize,
    classes: usize,
}

fn freeze<T: Scalar>(bytes: &[u8]) -> Result<Vec<FrozenMember<T>>, Failure> {
    let (model, _) = SwnModel::<T>::from_checkpoint(&Checkpoint::<T>::decode(bytes)?)?;
    Ok(model.freeze()?)
}

fn predict<T: Scalar>(members: &[FrozenMember<T>], x: &[f64], rows: usize, mask: u64) -> Result<Vec<f64>, Failure> {
    let chosen: Vec<&FrozenMember<T>> = members
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < 64 && mask >> i & 1 == 1)
        .map(|(_, m)| m)
        .collect();
    if chosen.is_empty() {
        return Err(invalid("member mask selects no member"));
    }
    let x = DenseArray::<T>::from_f64(&[rows, x.len() / rows.max(1)], x)?;
    let probs = chosen.iter().map(|m| m.predict_proba(&x)).collect::<Result<Vec<_>, _>>()?;
    Ok(average_probs(&probs)?.values().iter().map(|v| v.as_f64()).collect())
}

/// Loads a checkpoint written by a run. On success `*out` owns a new handle.
#[no_mangle]
pub extern "C" fn swn_model_load(path: *const c_char, out: *mut *mut SwnModelHandle) -> SwnStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        non_null(out as *const *mut SwnModelHandle, "out")?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let members = match checkpoint_precision(&bytes)? {
            Precision::F32 => Members::F32(freeze(&bytes)?),
            Precision::F64 => Members::F64(freeze(&bytes)?),
        };
        let first = match &members {
            Members::F32(m) => m.first().map(|m| m.spec().clone()),
            Members::F64(m) => m.first().map(|m| m.spec().clone()),
        }
        .ok_or_else(|| Failure(SwnStatus::Checkpoint, "checkpoint holds no members".into()))?;
        let handle = SwnModelHandle {
            members,
            input_features: first.input_features(),
            classes: first.classes,
        };
        write_out(out, Box::into_raw(Box::new(handle)), "out")
    })
}

/// Releases a handle from [`swn_model_load`]; null is ignored.
///
/// # Safety
/// `model` is null or a live handle from [`swn_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn swn_model_free(model: *mut SwnModelHandle) {
    if !model.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in `swn_model_load`.
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub extern "C" fn swn_model_member_count(model: *const SwnModelHandle, out: *mut usize) -> SwnStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let n = match &m.members {
            Members::F32(v) => v.len(),
            Members::F64(v) => v.len(),
        };
        write_out(out, n, "out")
    })
}

/// Flattened input features per sample.
#[no_mangle]
pub extern "C" fn swn_model_input_features(model: *const SwnModelHandle, out: *mut usize) -> SwnStatus {
    guard(|| write_out(out, non_null(model, "model")?.input_features, "out"))
}

#[no_mangle]
pub extern "C" fn swn_model_classes(model: *const SwnModelHandle, out: *mut usize) -> SwnStatus {
    guard(|| write_out(out, non_null(model, "model")?.classes, "out"))
}

/// Averaged class probabilities of the members selected by `member_mask`
/// (bit i selects member i). `x` is row-major `[rows, input_features]`;
/// `out` receives `rows * classes` values.
#[no_mangle]
pub extern "C" fn swn_model_predict_proba(
    model: *const SwnModelHandle,
    x: *const f64,
    rows: usize,
    member_mask: u64,
    out: *mut f64,
    out_len: usize,
) -> SwnStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if rows == 0 {
            return Err(invalid("rows must be positive"));
        }
        if out_len != rows * m.classes {
            return Err(invalid(format!("out_len is {out_len}, expected {}", rows * m.classes)));
        }
        let x = slice(x, rows * m.input_features, "x")?;
        let probs = match &m.members {
            Members::F32(v) => predict(v, x, rows, member_mask)?,
            Members::F64(v) => predict(v, x, rows, member_mask)?,
        };
        slice_mut(out, out_len, "out")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Expected calibration error of row-major `[rows, classes]` probabilities.
#[no_mangle]
pub extern "C" fn swn_ece(
    probs: *const f64,
    rows: usize,
    classes: usize,
    labels: *const usize,
    bins: usize,
    out: *mut f64,
) -> SwnStatus {
    guard(|| {
        let p = DenseArray::<f64>::from_f64(&[rows, classes], slice(probs, rows * classes, "probs")?)?;
        let e = ece(&p, slice(labels, rows, "labels")?, bins)?;
        write_out(out, e, "out")
    })
}

/// Groups layers `0..layer_count` from `pair_count` similarity entries
/// `(similarity[k], layer_a[k], layer_b[k])`, merging pairs above `epsilon`.
/// Layers no pair mentions stay alone. `out_group[l]` receives a group index;
/// groups are numbered by their smallest layer.
#[no_mangle]
pub extern "C" fn swn_group_by_queue(
    similarity: *const f64,
    layer_a: *const u32,
    layer_b: *const u32,
    pair_count: usize,
    epsilon: f64,
    layer_count: usize,
    out_group: *mut u32,
) -> SwnStatus {
    guard(|| {
        let (s, a, b) = (
            slice(similarity, pair_count, "similarity")?,
            slice(layer_a, pair_count, "layer_a")?,
            slice(layer_b, pair_count, "layer_b")?,
        );
        let mut queue = SimilarityQueue::new();
        for k in 0..pair_count {
            if a[k] as usize >= layer_count || b[k] as usize >= layer_count || a[k] == b[k] {
                return Err(invalid(format!("pair {k} ({}, {}) is out of range or a self pair", a[k], b[k])));
            }
            if s[k].is_nan() {
                return Err(Failure(SwnStatus::Numeric, format!("similarity {k} is NaN")));
            }
            queue.push(s[k], LayerId(a[k]), LayerId(b[k]));
        }
        let mut groups: Vec<BTreeSet<LayerId>> = group_by_queue(queue, epsilon).groups().to_vec();
        let seen: BTreeSet<LayerId> = groups.iter().flatten().copied().collect();
        groups.extend((0..layer_count as u32).map(LayerId).filter(|l| !seen.contains(l)).map(|l| BTreeSet::from([l])));
        groups.sort_by_key(|g| *g.first().expect("groups are non-empty"));
        let out = slice_mut(out_group, layer_count, "out_group")?;
        for (index, g) in groups.iter().enumerate() {
            for l in g {
                out[l.0 as usize] = index as u32;
            }
        }
        Ok(())
    })
}

/// Runs the experiment in the TOML config at `config_path`, writing artifacts
/// under `out_dir`. `*out_json` receives `{"dir": ..., "report": ...}`, to be
/// released with [`swn_string_free`].
#[no_mangle]
pub extern "C" fn swn_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> SwnStatus {
    guard(|| {
        let config = load_config(&path_arg(config_path, "config_path")?, &[])?;
        let out_root = path_arg(out_dir, "out_dir")?;
        non_null(out_json as *const *mut c_char, "out_json")?;
        let summary = run_and_emit(&config, &out_root)?;
        let json = serde_json::json!({ "dir": summary.dir, "report": summary.report });
        let text = CString::new(serde_json::to_string(&json).map_err(Error::from)?).expect("JSON has no nul bytes");
        write_out(out_json, text.into_raw(), "out_json")
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` is null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn swn_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: the pointer came from `CString::into_raw` in this crate.
        drop(unsafe { CString::from_raw(s) });
    }
}
