//! C ABI over devshift.
//!
//! Models are opaque handles created by `*_load` and released by `*_free`.
//! Every fallible call returns a status code (`DS_OK` on success); the
//! message of the last failure on the calling thread is available from
//! [`ds_last_error`]. Feature matrices are row-major `double` buffers of
//! `n_frames * n_bands` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use devshift::classifier::{self, ClassifierModel};
use devshift::conversion::{self, ConversionPlan};
use devshift::features::FeatureSequence;
use devshift::fhvae::{self, FhvaeModel};
use devshift::Error;
use ndarray::Array2;

pub const DS_OK: i32 = 0;
pub const DS_ERR_NULL_POINTER: i32 = 1;
pub const DS_ERR_INVALID_ARGUMENT: i32 = 2;
pub const DS_ERR_IO: i32 = 3;
pub const DS_ERR_FORMAT: i32 = 4;
pub const DS_ERR_SHAPE: i32 = 5;
pub const DS_ERR_NUMERICAL: i32 = 6;
pub const DS_ERR_BUFFER_TOO_SMALL: i32 = 7;
pub const DS_ERR_PANIC: i32 = 8;
pub const DS_ERR_OTHER: i32 = 9;

/// Opaque FHVAE model.
pub struct DsFhvae {
    model: FhvaeModel,
}

/// Opaque scene classifier.
pub struct DsClassifier {
    model: ClassifierModel,
    labels: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => DS_ERR_IO,
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) | Error::Wav(_) => DS_ERR_FORMAT,
            Error::Shape { .. } | Error::SequenceTooShort { .. } | Error::InputTooShort { .. } => {
                DS_ERR_SHAPE
            }
            Error::NumericalFailure { .. } | Error::Divergence { .. } => DS_ERR_NUMERICAL,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Empty(_) => DS_ERR_INVALID_ARGUMENT,
            _ => DS_ERR_OTHER,
        };
        Failure(code, e.to_string())
    }
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `f`, records any failure or panic and maps it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            DS_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_last_error(&msg);
            code
        }
        Err(_) => {
            set_last_error("panic inside devshift");
            DS_ERR_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(DS_ERR_NULL_POINTER, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DS_ERR_INVALID_ARGUMENT, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn features_arg(
    frames: *const f64,
    n_frames: usize,
    n_bands: usize,
) -> Result<FeatureSequence, Failure> {
    if frames.is_null() {
        return Err(fail(DS_ERR_NULL_POINTER, "frames is null"));
    }
    let len = n_frames
        .checked_mul(n_bands)
        .ok_or_else(|| fail(DS_ERR_INVALID_ARGUMENT, "matrix size overflows"))?;
    let data = std::slice::from_raw_parts(frames, len).to_vec();
    let m = Array2::from_shape_vec((n_frames, n_bands), data)
        .map_err(|e| fail(DS_ERR_SHAPE, e.to_string()))?;
    Ok(FeatureSequence::new(m, "ffi", "", "")?)
}

unsafe fn write_out(src: &[f64], out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(DS_ERR_NULL_POINTER, "output buffer is null"));
    }
    if capacity < src.len() {
        return Err(fail(
            DS_ERR_BUFFER_TOO_SMALL,
            format!("output needs {} values, capacity is {capacity}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn handle<'a, T>(h: *const T) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| fail(DS_ERR_NULL_POINTER, "handle is null"))
}

fn row_major(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next devshift call on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an FHVAE checkpoint written by `devshift fhvae-train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_load(path: *const c_char, out: *mut *mut DsFhvae) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(fail(DS_ERR_NULL_POINTER, "out is null"));
        }
        let model = FhvaeModel::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DsFhvae { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `h` must come from [`ds_fhvae_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_free(h: *mut DsFhvae) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Reports the model geometry. Any output pointer may be null.
///
/// # Safety
/// `h` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_dims(
    h: *const DsFhvae,
    n_bands: *mut usize,
    seg_len: *mut usize,
    dim_z1: *mut usize,
    dim_z2: *mut usize,
) -> i32 {
    guard(|| {
        let c = &handle(h)?.model.config;
        for (p, v) in [(n_bands, c.n_bands), (seg_len, c.seg_len), (dim_z1, c.dim_z1), (dim_z2, c.dim_z2)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Writes the sequence-level mu2 estimate (`dim_z2` values) of one
/// feature matrix.
///
/// # Safety
/// `frames` must hold `n_frames * n_bands` values and `out_mu2` have room
/// for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_infer_mu2(
    h: *const DsFhvae,
    frames: *const f64,
    n_frames: usize,
    n_bands: usize,
    out_mu2: *mut f64,
    capacity: usize,
) -> i32 {
    guard(|| {
        let model = &handle(h)?.model;
        let f = features_arg(frames, n_frames, n_bands)?;
        let mu2 = conversion::source_mu2(&f, model)?;
        write_out(&mu2, out_mu2, capacity)
    })
}

/// Converts one feature matrix toward `target_mu2`. The output holds
/// `floor(n_frames / seg_len) * seg_len` frames, stored in `*out_frames`.
///
/// # Safety
/// Buffers must match the stated sizes; `out` needs room for `capacity`
/// values.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_convert(
    h: *const DsFhvae,
    frames: *const f64,
    n_frames: usize,
    n_bands: usize,
    target_mu2: *const f64,
    mu2_len: usize,
    out: *mut f64,
    capacity: usize,
    out_frames: *mut usize,
) -> i32 {
    guard(|| {
        let model = &handle(h)?.model;
        if target_mu2.is_null() || out_frames.is_null() {
            return Err(fail(DS_ERR_NULL_POINTER, "target_mu2 or out_frames is null"));
        }
        let f = features_arg(frames, n_frames, n_bands)?;
        let plan = ConversionPlan::new("ffi", std::slice::from_raw_parts(target_mu2, mu2_len).to_vec())?;
        let conv = conversion::convert_sequence(&f, model, &plan)?;
        write_out(&row_major(&conv.frames), out, capacity)?;
        *out_frames = conv.num_frames();
        Ok(())
    })
}

/// Writes one row of `dim_z1` posterior-mean values per non-overlapping
/// segment; the row count goes to `*out_rows`.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_extract_z1(
    h: *const DsFhvae,
    frames: *const f64,
    n_frames: usize,
    n_bands: usize,
    out: *mut f64,
    capacity: usize,
    out_rows: *mut usize,
) -> i32 {
    guard(|| {
        let model = &handle(h)?.model;
        if out_rows.is_null() {
            return Err(fail(DS_ERR_NULL_POINTER, "out_rows is null"));
        }
        let f = features_arg(frames, n_frames, n_bands)?;
        let z1 = conversion::extract_z1_features(&f, model)?;
        write_out(&row_major(&z1.frames), out, capacity)?;
        *out_rows = z1.num_frames();
        Ok(())
    })
}

/// Mean of the per-segment z2 posterior means over a domain given as
/// `n_seqs` matrices, averaged per sequence first.
///
/// # Safety
/// `frames[i]` must hold `n_frames[i] * n_bands` values for every `i`.
#[no_mangle]
pub unsafe extern "C" fn ds_fhvae_infer_domain_mu2(
    h: *const DsFhvae,
    frames: *const *const f64,
    n_frames: *const usize,
    n_seqs: usize,
    n_bands: usize,
    out_mu2: *mut f64,
    capacity: usize,
) -> i32 {
    guard(|| {
        let model = &handle(h)?.model;
        if frames.is_null() || n_frames.is_null() {
            return Err(fail(DS_ERR_NULL_POINTER, "frames or n_frames is null"));
        }
        let ptrs = std::slice::from_raw_parts(frames, n_seqs);
        let lens = std::slice::from_raw_parts(n_frames, n_seqs);
        let seqs = ptrs
            .iter()
            .zip(lens)
            .map(|(&p, &t)| features_arg(p, t, n_bands))
            .collect::<Result<Vec<_>, _>>()?;
        let mu2 = fhvae::infer_mu2_domain(&seqs, model)?;
        write_out(&mu2, out_mu2, capacity)
    })
}

/// Loads a classifier checkpoint written by `devshift clf-train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_load(path: *const c_char, out: *mut *mut DsClassifier) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(fail(DS_ERR_NULL_POINTER, "out is null"));
        }
        let model = ClassifierModel::load(&path_arg(path)?)?;
        let labels = model
            .classes
            .iter()
            .map(|c| CString::new(c.as_str()).map_err(|_| fail(DS_ERR_FORMAT, "class label contains NUL")))
            .collect::<Result<Vec<_>, _>>()?;
        *out = Box::into_raw(Box::new(DsClassifier { model, labels }));
        Ok(())
    })
}

/// Releases a classifier; null is ignored.
///
/// # Safety
/// `h` must come from [`ds_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_free(h: *mut DsClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of scene classes, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_num_classes(h: *const DsClassifier) -> usize {
    h.as_ref().map_or(0, |c| c.model.num_classes())
}

/// Label of class `index`, owned by the handle; null when out of range.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_class_label(h: *const DsClassifier, index: usize) -> *const c_char {
    h.as_ref()
        .and_then(|c| c.labels.get(index))
        .map_or(std::ptr::null(), |s| s.as_ptr())
}

/// Writes class probabilities (`num_classes` values) for one feature
/// matrix.
///
/// # Safety
/// `frames` must hold `n_frames * n_bands` values and `out_probs` have room
/// for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn ds_classifier_predict(
    h: *const DsClassifier,
    frames: *const f64,
    n_frames: usize,
    n_bands: usize,
    out_probs: *mut f64,
    capacity: usize,
) -> i32 {
    guard(|| {
        let c = handle(h)?;
        let f = features_arg(frames, n_frames, n_bands)?;
        let p = classifier::predict(&c.model, &f)?;
        write_out(&p, out_probs, capacity)
    })
}
