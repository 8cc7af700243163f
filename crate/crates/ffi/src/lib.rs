//! C ABI over the trajattr library.
//!
//! Objects are opaque handles created by `trajattr_*_new`/`trajattr_train`
//! style constructors and released with the matching `*_free`. Every fallible
//! function returns a [`TrajattrStatus`]; on failure the message is available
//! from [`trajattr_last_error`] on the same thread until the next call.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use trajattr::attribution::score::mean_gradient;
use trajattr::attribution::{backward_adamw, backward_sgd, validation_gradients, AdamWDynamics, Ggn, ScoreTable};
use trajattr::config::ExperimentConfig;
use trajattr::data::{gen_blobs, Dataset};
use trajattr::math::{self, Matrix};
use trajattr::model::Model;
use trajattr::oracle::{tsloo_retrain, RemovalMode, RetrainContext};
use trajattr::trajectory::{record_in_memory, RecordedRun, RunConfig};
use trajattr::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajattrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    UndefinedCorrelation = 3,
    Format = 4,
    Numeric = 5,
    Determinism = 6,
    InvalidConfig = 7,
    Dependency = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Which influence estimator to run.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajattrEstimator {
    Sgd = 0,
    Adamw = 1,
}

/// A labelled dataset.
pub struct TrajattrDataset {
    inner: Dataset,
}

/// A recorded training run with per-step checkpoints.
pub struct TrajattrRun {
    data: Dataset,
    config: RunConfig,
    run: RecordedRun,
}

/// Scores keyed by (step, sample), one value per key.
pub struct TrajattrScores {
    keys: Vec<(usize, usize)>,
    values: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TrajattrStatus {
    match err {
        Error::InvalidInput(_) => TrajattrStatus::InvalidInput,
        Error::UndefinedCorrelation(_) => TrajattrStatus::UndefinedCorrelation,
        Error::Format { .. } => TrajattrStatus::Format,
        Error::Numeric { .. } => TrajattrStatus::Numeric,
        Error::Determinism(_) => TrajattrStatus::Determinism,
        Error::Config(_) => TrajattrStatus::InvalidConfig,
        Error::Dependency { .. } => TrajattrStatus::Dependency,
        Error::Io(_) => TrajattrStatus::Io,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TrajattrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TrajattrStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed for `{name}`"));
            TrajattrStatus::NullPointer
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(format!("output buffer too small; {need} entries needed"));
            TrajattrStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            TrajattrStatus::Panic
        }
    }
}

unsafe fn r<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(name));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn trajattr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trajattr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Dataset from row-major `features` (`n × d`) and `labels` (`n`).
///
/// # Safety
/// `features` must point to `n * d` doubles, `labels` to `n` values and
/// `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn trajattr_dataset_new(
    features: *const f64,
    labels: *const u32,
    n: usize,
    d: usize,
    num_classes: usize,
    out: *mut *mut TrajattrDataset,
) -> TrajattrStatus {
    guard(|| {
        let x = slice(features, n * d, "features")?.to_vec();
        let y = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let data = Dataset::new(x, y, d, num_classes)?;
        put(out, Box::into_raw(Box::new(TrajattrDataset { inner: data })), "out")
    })
}

/// Seeded Gaussian-blob dataset.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn trajattr_dataset_blobs(
    n: usize,
    d: usize,
    num_classes: usize,
    spread: f64,
    seed: u64,
    out: *mut *mut TrajattrDataset,
) -> TrajattrStatus {
    guard(|| {
        let data = gen_blobs(n, d, num_classes, spread, seed)?;
        put(out, Box::into_raw(Box::new(TrajattrDataset { inner: data })), "out")
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn trajattr_dataset_len(data: *const TrajattrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trajattr_dataset_free(data: *mut TrajattrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Train on `data` with the model, optimizer, mask and seed sections of a
/// TOML experiment config (NULL or empty for defaults), keeping checkpoints.
///
/// # Safety
/// `data` must be a live dataset, `config_toml` NULL or a NUL-terminated
/// UTF-8 string, and `out` writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn trajattr_train(
    data: *const TrajattrDataset,
    config_toml: *const c_char,
    out: *mut *mut TrajattrRun,
) -> TrajattrStatus {
    guard(|| {
        let data = &r(data, "data")?.inner;
        let text = if config_toml.is_null() {
            ""
        } else {
            CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Error::invalid("config is not UTF-8"))?
        };
        let mut cfg = ExperimentConfig::from_toml(text, &[])?;
        cfg.dataset.train = data.len();
        cfg.dataset.dim = data.dim();
        cfg.dataset.classes = data.num_classes();
        cfg.validate()?;
        let config = cfg.run_config(cfg.optimizer.lr)?;
        let run = record_in_memory(data, &config, true)?;
        let handle = TrajattrRun {
            data: data.clone(),
            config,
            run,
        };
        put(out, Box::into_raw(Box::new(handle)), "out")
    })
}

/// Number of optimizer steps, or 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn trajattr_run_num_steps(run: *const TrajattrRun) -> usize {
    run.as_ref().map_or(0, |r| r.config.num_steps())
}

/// Number of model parameters, or 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn trajattr_run_param_count(run: *const TrajattrRun) -> usize {
    run.as_ref().map_or(0, |r| r.run.theta_final.len())
}

/// Copy the final parameters into `out` (capacity `cap`).
///
/// # Safety
/// `run` must be a live run handle and `out` point to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn trajattr_run_theta_final(
    run: *const TrajattrRun,
    out: *mut f64,
    cap: usize,
) -> TrajattrStatus {
    guard(|| {
        let theta = &r(run, "run")?.run.theta_final;
        if cap < theta.len() {
            return Err(Failure::Small(theta.len()));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        ptr::copy_nonoverlapping(theta.as_ptr(), out, theta.len());
        Ok(())
    })
}

/// Score every (step, sample) occurrence of the run against the mean
/// validation-loss gradient over `val`. Positive scores mark samples whose
/// removal is predicted to raise validation loss.
///
/// # Safety
/// `run` and `val` must be live handles, `out` writable storage for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn trajattr_attribute(
    run: *const TrajattrRun,
    estimator: TrajattrEstimator,
    val: *const TrajattrDataset,
    out: *mut *mut TrajattrScores,
) -> TrajattrStatus {
    guard(|| {
        let run = r(run, "run")?;
        let val = &r(val, "val")?.inner;
        let traj = &run.run.trajectory;
        let mask = traj.manifest.build_mask()?;
        let model = Model::new(run.config.model.clone())?;
        let ids: Vec<usize> = (0..val.len()).collect();
        let vg = validation_gradients(&model, &run.run.theta_final, val, &ids, &mask)?;
        let mean = Matrix::from_rows(&[mean_gradient(&vg)])?;
        let set = match estimator {
            TrajattrEstimator::Sgd => backward_sgd(traj, &Ggn, None)?.0,
            TrajattrEstimator::Adamw => {
                backward_adamw(
                    traj,
                    &AdamWDynamics::from_config(&run.config.optimizer.adamw),
                    &Ggn,
                    None,
                )?
                .0
            }
        };
        let table = ScoreTable::from_set(&set, &mean)?;
        let scores = TrajattrScores {
            values: (0..table.keys.len()).map(|i| table.scores.get(i, 0)).collect(),
            keys: table.keys,
        };
        put(out, Box::into_raw(Box::new(scores)), "out")
    })
}

/// Number of scored (step, sample) pairs, or 0 for NULL.
///
/// # Safety
/// `scores` must be NULL or a live scores handle.
#[no_mangle]
pub unsafe extern "C" fn trajattr_scores_len(scores: *const TrajattrScores) -> usize {
    scores.as_ref().map_or(0, |s| s.keys.len())
}

/// Entry `i`: its step, sample id and score.
///
/// # Safety
/// `scores` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn trajattr_scores_get(
    scores: *const TrajattrScores,
    i: usize,
    step: *mut usize,
    sample: *mut usize,
    score: *mut f64,
) -> TrajattrStatus {
    guard(|| {
        let s = r(scores, "scores")?;
        let (&(t, z), &v) = s
            .keys
            .get(i)
            .zip(s.values.get(i))
            .ok_or_else(|| Error::invalid(format!("index {i} out of range ({} scores)", s.keys.len())))?;
        put(step, t, "step")?;
        put(sample, z, "sample")?;
        put(score, v, "score")
    })
}

/// # Safety
/// `scores` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trajattr_scores_free(scores: *mut TrajattrScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// Retrain without `sample` at `step` and report the mean change in
/// validation loss over `val`.
///
/// # Safety
/// `run` and `val` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn trajattr_tsloo(
    run: *const TrajattrRun,
    sample: usize,
    step: usize,
    val: *const TrajattrDataset,
    out: *mut f64,
) -> TrajattrStatus {
    guard(|| {
        let run = r(run, "run")?;
        let val = &r(val, "val")?.inner;
        let ctx = RetrainContext::new(&run.data, &run.config, &run.run)?;
        let ids: Vec<usize> = (0..val.len()).collect();
        let rec = tsloo_retrain(&ctx, sample, step, RemovalMode::Subtract, val, &ids)?;
        put(out, rec.loss_deltas.iter().sum::<f64>() / ids.len() as f64, "out")
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trajattr_run_free(run: *mut TrajattrRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Spearman rank correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must each point to `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trajattr_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> TrajattrStatus {
    guard(|| {
        let rho = math::spearman_rho(slice(x, n, "x")?, slice(y, n, "y")?)?;
        put(out, rho, "out")
    })
}
