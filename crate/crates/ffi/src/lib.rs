//! C ABI over `conformal_decode`.
//!
//! Every fallible function returns a [`CdStatus`]; on failure a description
//! is kept per thread and can be read with [`cd_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. Slices are
//! passed as pointer plus length; a null pointer with length 0 is an empty
//! slice.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use conformal_decode::decoding::{conformal_set, prediction_set, PredictionSet};
use conformal_decode::{
    conformal_decode_step, conformal_quantile, empirical_coverage, fit_binned, read_dataset,
    CalibrationModel, Dataset, DistributionRecord, Error, ErrorKind, ReadOptions,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidData = 3,
    Io = 4,
    BufferTooSmall = 5,
    Panic = 6,
    Internal = 7,
}

/// Validated set of distribution records.
pub struct CdDataset {
    inner: Dataset,
}

/// Fitted calibration thresholds.
pub struct CdModel {
    inner: CalibrationModel,
}

/// Outcome of one decoding step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdStep {
    pub token: usize,
    pub set_size: usize,
    pub cum_mass: f64,
    pub entropy: f64,
    pub qhat: f64,
    /// Entropy bin used, or -1 for a global model.
    pub bin: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CdStatus {
    match (e, e.kind()) {
        (Error::Io { .. }, _) => CdStatus::Io,
        (_, ErrorKind::Config) => CdStatus::InvalidArgument,
        (_, ErrorKind::Data) => CdStatus::InvalidData,
        (_, ErrorKind::Internal) => CdStatus::Internal,
    }
}

struct Fail(CdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for the calling thread.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            CdStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CdStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn model_ref<'a>(m: *const CdModel) -> Result<&'a CalibrationModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn dataset_ref<'a>(d: *const CdDataset) -> Result<&'a Dataset, Fail> {
    d.as_ref().map(|d| &d.inner).ok_or_else(|| null("dataset"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a JSONL record file. With `strict` false, invalid rows are dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_dataset_read(
    path: *const c_char,
    strict: bool,
    out: *mut *mut CdDataset,
) -> CdStatus {
    guard(|| {
        let path = path_arg(path)?;
        let opts = ReadOptions {
            strict,
            ..ReadOptions::default()
        };
        let (inner, _) = read_dataset(path, opts)?;
        write_out(out, Box::into_raw(Box::new(CdDataset { inner })), "out")
    })
}

/// Builds a dataset from `n_records` dense rows of `vocab_size` probabilities
/// each (row-major) and one gold token per row. Row `i` gets key `(i, 0)`.
///
/// # Safety
/// `probs` must hold `n_records * vocab_size` values and `gold` `n_records`.
#[no_mangle]
pub unsafe extern "C" fn cd_dataset_from_dense(
    probs: *const f64,
    gold: *const usize,
    n_records: usize,
    vocab_size: usize,
    out: *mut *mut CdDataset,
) -> CdStatus {
    guard(|| {
        let total = n_records
            .checked_mul(vocab_size)
            .ok_or_else(|| Fail(CdStatus::InvalidArgument, "size overflow".into()))?;
        let probs = slice(probs, total, "probs")?;
        let gold = slice(gold, n_records, "gold")?;
        let records = (0..n_records)
            .map(|i| {
                DistributionRecord::dense(
                    i as u64,
                    0,
                    gold[i],
                    probs[i * vocab_size..(i + 1) * vocab_size].to_vec(),
                )
            })
            .collect();
        let inner = Dataset::new(records)?;
        write_out(out, Box::into_raw(Box::new(CdDataset { inner })), "out")
    })
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_dataset_len(ds: *const CdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_dataset_free(ds: *mut CdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits thresholds at miscoverage `alpha` with `num_bins` entropy bins
/// (1 for a single global threshold).
///
/// # Safety
/// `ds` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_fit(
    ds: *const CdDataset,
    alpha: f64,
    num_bins: usize,
    out: *mut *mut CdModel,
) -> CdStatus {
    guard(|| {
        let inner = fit_binned(dataset_ref(ds)?, alpha, num_bins)?;
        write_out(out, Box::into_raw(Box::new(CdModel { inner })), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        let inner = CalibrationModel::load(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(CdModel { inner })), "out")
    })
}

/// Writes the model as JSON, atomically.
///
/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_model_save(m: *const CdModel, path: *const c_char) -> CdStatus {
    guard(|| Ok(model_ref(m)?.save(path_arg(path)?)?))
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(m: *mut CdModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of thresholds, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_model_num_bins(m: *const CdModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.num_bins())
}

/// Threshold of bin `bin`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_qhat(m: *const CdModel, bin: usize, out: *mut f64) -> CdStatus {
    guard(|| {
        let model = model_ref(m)?;
        let q = *model.qhats.get(bin).ok_or_else(|| {
            Fail(
                CdStatus::InvalidArgument,
                format!("bin {bin} out of range 0..{}", model.num_bins()),
            )
        })?;
        write_out(out, q, "out")
    })
}

/// Fraction of `test` records whose gold token lands in its calibrated set.
///
/// # Safety
/// `m` and `test` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_coverage(
    m: *const CdModel,
    test: *const CdDataset,
    out: *mut f64,
) -> CdStatus {
    guard(|| {
        let report = empirical_coverage(model_ref(m)?, dataset_ref(test)?)?;
        write_out(out, report.coverage, "out")
    })
}

/// Nonconformity score of `gold`: the total mass of tokens at least as likely.
///
/// # Safety
/// `probs` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_aps_score(
    probs: *const f64,
    len: usize,
    gold: usize,
    out: *mut f64,
) -> CdStatus {
    guard(|| {
        let probs = slice(probs, len, "probs")?;
        let record = DistributionRecord::dense(0, 0, gold, probs.to_vec());
        write_out(out, conformal_decode::aps_score(&record)?, "out")
    })
}

/// Finite-sample conformal quantile of `n` scores at miscoverage `alpha`.
///
/// # Safety
/// `scores` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_conformal_quantile(
    scores: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> CdStatus {
    guard(|| {
        let q = conformal_quantile(slice(scores, n, "scores")?, alpha)?;
        write_out(out, q, "out")
    })
}

unsafe fn emit_set(
    set: PredictionSet,
    out_ids: *mut usize,
    capacity: usize,
    out_len: *mut usize,
    out_mass: *mut f64,
) -> Result<(), Fail> {
    write_out(out_len, set.len(), "out_len")?;
    if set.len() > capacity {
        return Err(Fail(
            CdStatus::BufferTooSmall,
            format!("set has {} tokens, buffer holds {capacity}", set.len()),
        ));
    }
    if out_ids.is_null() {
        return Err(null("out_ids"));
    }
    ptr::copy_nonoverlapping(set.token_ids.as_ptr(), out_ids, set.len());
    if !out_mass.is_null() {
        out_mass.write(set.cum_mass);
    }
    Ok(())
}

/// Top-p set: the shortest most-probable prefix whose mass reaches `q`.
/// Token ids go to `out_ids` in descending probability. When `capacity` is
/// too small the call fails with `BUFFER_TOO_SMALL` and `out_len` holds the
/// size needed. `out_mass` may be null.
///
/// # Safety
/// `probs` must hold `len` values, `out_ids` `capacity` slots; `out_len` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_prediction_set(
    probs: *const f64,
    len: usize,
    q: f64,
    out_ids: *mut usize,
    capacity: usize,
    out_len: *mut usize,
    out_mass: *mut f64,
) -> CdStatus {
    guard(|| {
        let set = prediction_set(slice(probs, len, "probs")?, q)?;
        emit_set(set, out_ids, capacity, out_len, out_mass)
    })
}

/// Calibrated set: every token whose score is at most `q`, or the top token
/// alone when none is. Buffers as in [`cd_prediction_set`].
///
/// # Safety
/// As for [`cd_prediction_set`].
#[no_mangle]
pub unsafe extern "C" fn cd_conformal_set(
    probs: *const f64,
    len: usize,
    q: f64,
    out_ids: *mut usize,
    capacity: usize,
    out_len: *mut usize,
    out_mass: *mut f64,
) -> CdStatus {
    guard(|| {
        let set = conformal_set(slice(probs, len, "probs")?, q)?;
        emit_set(set, out_ids, capacity, out_len, out_mass)
    })
}

/// One calibrated decoding step; the same `seed` always picks the same token.
///
/// # Safety
/// `m` must be a live handle, `probs` must hold `len` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cd_decode_step(
    m: *const CdModel,
    probs: *const f64,
    len: usize,
    seed: u64,
    out: *mut CdStep,
) -> CdStatus {
    guard(|| {
        let step = conformal_decode_step(slice(probs, len, "probs")?, model_ref(m)?, seed)?;
        let c = CdStep {
            token: step.chosen_token,
            set_size: step.set.len(),
            cum_mass: step.set.cum_mass,
            entropy: step.entropy,
            qhat: step.qhat_used,
            bin: step.bin.map_or(-1, |b| b as i64),
        };
        write_out(out, c, "out")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status_codes() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, CdStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cd_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
    }

    #[test]
    fn success_clears_the_last_error() {
        guard(|| Err(null("x")));
        assert!(!cd_last_error_message().is_null());
        assert_eq!(guard(|| Ok(())), CdStatus::Ok);
        assert!(cd_last_error_message().is_null());
    }

    #[test]
    fn error_kinds_map_to_statuses() {
        assert_eq!(
            status_of(&Error::InvalidArgument("bad".into())),
            CdStatus::InvalidArgument
        );
        assert_eq!(status_of(&Error::Internal("x".into())), CdStatus::Internal);
        assert_eq!(status_of(&Error::Empty("dataset")), CdStatus::InvalidData);
        let io = Error::Io {
            path: "p".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(status_of(&io), CdStatus::Io);
    }

    #[test]
    fn interior_nul_in_message_is_kept_printable() {
        set_last_error("a\0b".into());
        let msg = unsafe { CStr::from_ptr(cd_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
