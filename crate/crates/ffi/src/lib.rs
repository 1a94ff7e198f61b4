//! C ABI over the scoring library.
//!
//! Every function returns a [`RepplStatus`]; on failure the thread-local
//! message from [`reppl_last_error_message`] describes it. Datasets and
//! scores are opaque handles released with their `_free` function.
//! Variable-length outputs are copied into caller buffers: the required
//! element count is always written to `out_len`, and
//! `REPPL_STATUS_BUFFER_TOO_SMALL` is returned when `cap` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use reppl::metrics::{auc, evaluate, LabeledScores};
use reppl::trace::{read_dataset, separation_fixture, GenerationTrace};
use reppl::{score_trace, Error, Pool, RePPLConfig, TokenUncertainty};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Invariant = 5,
    MissingField = 6,
    EmptyGeneration = 7,
    DegenerateLabels = 8,
    DegenerateQuality = 9,
    Numerical = 10,
    InvalidArgument = 11,
    OutOfRange = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Values accepted in [`RepplConfig::pool`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepplPool {
    Max = 0,
    Avg = 1,
    Roll = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepplConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// One of the `RepplPool` values.
    pub pool: i32,
    pub cv_mean_floor: f64,
}

/// Per-token arrays held by a score handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepplField {
    InputCv = 0,
    InputPseudoConf = 1,
    InputImportance = 2,
    OutputLogprobs = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RepplScoreSummary {
    pub inner_ppl: f64,
    pub outer_ppl: f64,
    pub reppl: f64,
    pub input_len: usize,
    pub output_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RepplEvalResult {
    pub auc: f64,
    pub acc_gmean: f64,
    pub threshold_at_max_gmean: f64,
    pub spearman: f64,
    pub prr: f64,
}

/// Loaded traces.
pub struct RepplDataset {
    traces: Vec<GenerationTrace>,
}

/// Token-level uncertainty of one example.
pub struct RepplScore {
    inner: TokenUncertainty,
}

struct Failure {
    status: RepplStatus,
    message: String,
}

impl Failure {
    fn new(status: RepplStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Format(_) | Error::Json(_) => RepplStatus::Format,
            Error::Invariant(_) => RepplStatus::Invariant,
            Error::MissingField { .. } => RepplStatus::MissingField,
            Error::EmptyGeneration { .. } => RepplStatus::EmptyGeneration,
            Error::DegenerateLabels => RepplStatus::DegenerateLabels,
            Error::DegenerateQuality => RepplStatus::DegenerateQuality,
            Error::Numerical(_) => RepplStatus::Numerical,
            Error::InvalidArgument(_) => RepplStatus::InvalidArgument,
            Error::Io { .. } => RepplStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RepplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            RepplStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic");
            RepplStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(RepplStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn dataset<'a>(ds: *const RepplDataset) -> Result<&'a RepplDataset, Failure> {
    non_null(ds, "dataset")?;
    Ok(&*ds)
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `src` into `buf` if it fits, reporting the length either way.
unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    non_null(out_len, "out_len")?;
    *out_len = src.len();
    if src.len() > cap {
        return Err(Failure::new(
            RepplStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        non_null(buf, "buffer")?;
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    Ok(())
}

fn to_config(cfg: &RepplConfig) -> Result<RePPLConfig, Failure> {
    let pool = match cfg.pool {
        0 => Pool::Max,
        1 => Pool::Avg,
        2 => Pool::Roll,
        other => {
            return Err(Failure::new(
                RepplStatus::InvalidArgument,
                format!("unknown pool {other}"),
            ))
        }
    };
    let c = RePPLConfig {
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        pool,
        cv_mean_floor: cfg.cv_mean_floor,
    };
    c.validate()?;
    Ok(c)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn reppl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn reppl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out` must point to writable memory for one `RepplConfig`.
#[no_mangle]
pub unsafe extern "C" fn reppl_config_default(out: *mut RepplConfig) -> RepplStatus {
    guard(|| {
        non_null(out, "out")?;
        let d = RePPLConfig::default();
        *out = RepplConfig {
            alpha: d.alpha,
            epsilon: d.epsilon,
            pool: RepplPool::Avg as i32,
            cv_mean_floor: d.cv_mean_floor,
        };
        Ok(())
    })
}

/// Loads and validates every record of a dataset directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_dataset_open(path: *const c_char, out: *mut *mut RepplDataset) -> RepplStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(RepplStatus::InvalidUtf8, "path is not UTF-8"))?;
        let traces = read_dataset(path)?.load_all()?.records;
        *out = Box::into_raw(Box::new(RepplDataset { traces }));
        Ok(())
    })
}

/// The bundled eight-example synthetic dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_dataset_fixture(out: *mut *mut RepplDataset) -> RepplStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(RepplDataset {
            traces: separation_fixture().records,
        }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn reppl_dataset_free(ds: *mut RepplDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_dataset_len(ds: *const RepplDataset, out_len: *mut usize) -> RepplStatus {
    guard(|| {
        let ds = dataset(ds)?;
        non_null(out_len, "out_len")?;
        *out_len = ds.traces.len();
        Ok(())
    })
}

unsafe fn trace_at(ds: *const RepplDataset, index: usize) -> Result<&'static GenerationTrace, Failure> {
    let ds: &'static RepplDataset = dataset(ds)?;
    ds.traces.get(index).ok_or_else(|| {
        Failure::new(
            RepplStatus::OutOfRange,
            format!("index {index} out of range for {} examples", ds.traces.len()),
        )
    })
}

/// Copies the example id (UTF-8, NUL-terminated) into `buf`. `out_len`
/// receives the id length in bytes excluding the terminator.
///
/// # Safety
/// `ds` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn reppl_dataset_example_id(
    ds: *const RepplDataset,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> RepplStatus {
    guard(|| {
        let trace = trace_at(ds, index)?;
        let mut bytes: Vec<c_char> = trace.example_id.bytes().map(|b| b as c_char).collect();
        let len = bytes.len();
        bytes.push(0);
        let mut needed = 0;
        let result = copy_out(&bytes, buf, cap, &mut needed);
        non_null(out_len, "out_len")?;
        *out_len = len;
        result
    })
}

/// Scores one example.
///
/// # Safety
/// `ds` must be a live handle, `cfg` a valid config pointer and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_score_example(
    ds: *const RepplDataset,
    index: usize,
    cfg: *const RepplConfig,
    out: *mut *mut RepplScore,
) -> RepplStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let trace = trace_at(ds, index)?;
        non_null(cfg, "cfg")?;
        let cfg = to_config(&*cfg)?;
        let inner = score_trace(trace, &cfg)?;
        *out = Box::into_raw(Box::new(RepplScore { inner }));
        Ok(())
    })
}

/// # Safety
/// `score` must be a handle from this library, not yet freed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn reppl_score_free(score: *mut RepplScore) {
    if !score.is_null() {
        drop(Box::from_raw(score));
    }
}

/// # Safety
/// `score` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_score_summary(score: *const RepplScore, out: *mut RepplScoreSummary) -> RepplStatus {
    guard(|| {
        non_null(score, "score")?;
        non_null(out, "out")?;
        let u = &(*score).inner;
        *out = RepplScoreSummary {
            inner_ppl: u.inner_ppl,
            outer_ppl: u.outer_ppl,
            reppl: u.reppl,
            input_len: u.input_cv.len(),
            output_len: u.output_logprobs.len(),
        };
        Ok(())
    })
}

/// Copies one per-token array of a score.
///
/// # Safety
/// `score` must be a live handle; `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn reppl_score_copy(
    score: *const RepplScore,
    field: i32,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> RepplStatus {
    guard(|| {
        non_null(score, "score")?;
        let u = &(*score).inner;
        let src = match field {
            0 => &u.input_cv,
            1 => &u.input_pseudo_conf,
            2 => &u.input_importance,
            3 => &u.output_logprobs,
            other => {
                return Err(Failure::new(
                    RepplStatus::InvalidArgument,
                    format!("unknown field {other}"),
                ))
            }
        };
        copy_out(src, buf, cap, out_len)
    })
}

/// RePPL of every example, in dataset order. Values are non-positive and
/// more negative for hallucinations; negate them before [`reppl_auc`].
///
/// # Safety
/// `ds` and `cfg` must be valid; `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn reppl_score_dataset(
    ds: *const RepplDataset,
    cfg: *const RepplConfig,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> RepplStatus {
    guard(|| {
        let ds = dataset(ds)?;
        non_null(cfg, "cfg")?;
        let cfg = to_config(&*cfg)?;
        let values = ds
            .traces
            .iter()
            .map(|t| score_trace(t, &cfg).map(|u| u.reppl))
            .collect::<Result<Vec<f64>, Error>>()?;
        copy_out(&values, buf, cap, out_len)
    })
}

unsafe fn labeled(scores: *const f64, labels: *const u8, n: usize) -> Result<(Vec<f64>, Vec<bool>), Failure> {
    let s = slice_in(scores, n, "scores")?;
    let l = slice_in(labels, n, "labels")?;
    Ok((s.to_vec(), l.iter().map(|&v| v != 0).collect()))
}

/// AUC of `scores` (larger = more hallucinated) against `labels`
/// (non-zero = hallucinated).
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RepplStatus {
    guard(|| {
        non_null(out, "out")?;
        let (s, l) = labeled(scores, labels, n)?;
        *out = auc(&s, &l)?;
        Ok(())
    })
}

/// All metrics with quality taken as `1 − label`.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reppl_evaluate(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut RepplEvalResult,
) -> RepplStatus {
    guard(|| {
        non_null(out, "out")?;
        let (scores, labels) = labeled(scores, labels, n)?;
        let r = evaluate(&LabeledScores {
            scores,
            labels,
            quality: None,
        })?;
        *out = RepplEvalResult {
            auc: r.auc,
            acc_gmean: r.acc_gmean,
            threshold_at_max_gmean: r.threshold_at_max_gmean,
            spearman: r.spearman,
            prr: r.prr,
        };
        Ok(())
    })
}
