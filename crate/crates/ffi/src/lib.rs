//! C ABI over the fdrec toolkit.
//!
//! Datasets and models are opaque handles created by `fdrec_*_open`/`load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`FdrecStatus`]; on failure `fdrec_last_error` describes the
//! cause for the calling thread. Panics are caught at the boundary and
//! reported as `FDREC_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fdrec::baselines::{HisPop, SOnly};
use fdrec::cli::{load_split, RunConfig};
use fdrec::dataio::{filter_users, generate_synthetic, split_global_timeline, Partition, SECONDS_PER_DAY};
use fdrec::diffcore::Checkpoint;
use fdrec::ensemble::Ensemble;
use fdrec::evalharness::{build_cases, evaluate, Protocol, Scorer};
use fdrec::exprec::ExpRec;
use fdrec::features::Encoded;
use fdrec::reprec::RepRec;
use fdrec::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Checkpoint = 7,
    Unsupported = 8,
    Internal = 9,
}

/// Which candidate protocol to evaluate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdrecProtocol {
    Repeat = 0,
    Exploration = 1,
    Combined = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdrecPartition {
    Train = 0,
    Valid = 1,
    Test = 2,
}

/// Mean ranking metrics over `n` cases.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdrecMetrics {
    pub hr: f64,
    pub ndcg: f64,
    pub n: usize,
}

/// An encoded, filtered and split interaction log.
pub struct FdrecDataset {
    enc: Encoded,
}

/// A scorer bound to the vocabulary of the dataset it was loaded with.
pub struct FdrecModel {
    scorer: Box<dyn Scorer + Send>,
    users: Vec<String>,
    stores: Vec<String>,
    parameters: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(FdrecStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => FdrecStatus::Io,
            Error::Parse { .. } => FdrecStatus::Parse,
            Error::Config(_) => FdrecStatus::Config,
            Error::Checkpoint(_) => FdrecStatus::Checkpoint,
            _ => FdrecStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: FdrecStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FdrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FdrecStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            FdrecStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(FdrecStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FdrecStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(FdrecStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(FdrecStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failed call on this thread; empty when none failed.
/// Valid until the next fdrec call on the same thread.
#[no_mangle]
pub extern "C" fn fdrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fdrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load the dataset described by a config file (paths relative to it).
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_open(config_path: *const c_char, out: *mut *mut FdrecDataset) -> FdrecStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(text(config_path, "config_path")?);
        let cfg = RunConfig::load(&path)?;
        let split = load_split(&cfg).map_err(|e| match e.downcast::<Error>() {
            Ok(e) => Failure::from(e),
            Err(e) => fail(FdrecStatus::InvalidArgument, format!("{e:#}")),
        })?;
        *out = Box::into_raw(Box::new(FdrecDataset { enc: Encoded::new(&split)? }));
        Ok(())
    })
}

/// Generate a synthetic dataset from config text (its `[synth]` and `[data]`
/// sections are used) and `seed`.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_synthetic(config_toml: *const c_char, seed: u64, out: *mut *mut FdrecDataset) -> FdrecStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = RunConfig::parse(text(config_toml, "config_toml")?)?;
        let (log, _) = generate_synthetic(&cfg.synth, seed)?;
        let log = filter_users(&log, cfg.data.min_orders)?;
        let split = split_global_timeline(log, cfg.data.test_days * SECONDS_PER_DAY, cfg.data.valid_days * SECONDS_PER_DAY)?;
        *out = Box::into_raw(Box::new(FdrecDataset { enc: Encoded::new(&split)? }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from a dataset constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_free(ds: *mut FdrecDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Sizes of the dataset vocabularies and log.
///
/// # Safety
/// `ds` must be a live dataset; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_counts(ds: *const FdrecDataset, users: *mut usize, stores: *mut usize, interactions: *mut usize) -> FdrecStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        *out_ptr(users, "users")? = ds.enc.n_users();
        *out_ptr(stores, "stores")? = ds.enc.n_stores();
        *out_ptr(interactions, "interactions")? = ds.enc.len();
        Ok(())
    })
}

/// Half-open interaction range `[start, end)` of a partition.
///
/// # Safety
/// `ds` must be a live dataset; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_partition(ds: *const FdrecDataset, part: FdrecPartition, start: *mut usize, end: *mut usize) -> FdrecStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let p = match part {
            FdrecPartition::Train => Partition::Train,
            FdrecPartition::Valid => Partition::Valid,
            FdrecPartition::Test => Partition::Test,
        };
        let r = ds.enc.partition_range(p);
        *out_ptr(start, "start")? = r.start;
        *out_ptr(end, "end")? = r.end;
        Ok(())
    })
}

/// Dense index of a store id, as used for candidates.
///
/// # Safety
/// `ds` must be a live dataset, `store_id` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_store_index(ds: *const FdrecDataset, store_id: *const c_char, out: *mut u32) -> FdrecStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let id = text(store_id, "store_id")?;
        let i = ds
            .enc
            .store_of(id)
            .ok_or_else(|| fail(FdrecStatus::InvalidArgument, format!("unknown store {id}")))?;
        *out_ptr(out, "out")? = i;
        Ok(())
    })
}

/// Distinct stores the user of interaction `pos` ordered from earlier,
/// ascending. Writes at most `cap` indices to `buf` and the full count to
/// `len`; pass `cap = 0` to query the count.
///
/// # Safety
/// `ds` must be a live dataset, `buf` must have room for `cap` values (it may
/// be null when `cap` is 0) and `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_dataset_prior_stores(ds: *const FdrecDataset, pos: usize, buf: *mut u32, cap: usize, len: *mut usize) -> FdrecStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let len = out_ptr(len, "len")?;
        if pos >= ds.enc.len() {
            return Err(fail(FdrecStatus::InvalidArgument, format!("interaction {pos} out of range")));
        }
        let prior = ds.enc.prior_stores(pos);
        *len = prior.len();
        if cap > 0 {
            if buf.is_null() {
                return Err(fail(FdrecStatus::NullPointer, "buf is null"));
            }
            let n = cap.min(prior.len());
            std::slice::from_raw_parts_mut(buf, n).copy_from_slice(&prior[..n]);
        }
        Ok(())
    })
}

fn model_of(ds: &FdrecDataset, scorer: Box<dyn Scorer + Send>, parameters: usize) -> *mut FdrecModel {
    Box::into_raw(Box::new(FdrecModel {
        scorer,
        users: ds.enc.users.clone(),
        stores: ds.enc.stores.clone(),
        parameters,
    }))
}

/// The parameter-free situation-aware popularity baseline (repeat only).
///
/// # Safety
/// `ds` must be a live dataset; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_model_hispop(ds: *const FdrecDataset, out: *mut *mut FdrecModel) -> FdrecStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = model_of(handle(ds, "dataset")?, Box::new(HisPop), 0);
        Ok(())
    })
}

fn load_ck(path: *const c_char) -> Result<Checkpoint, Failure> {
    let p = unsafe { text(path, "checkpoint path")? };
    Ok(Checkpoint::load(std::path::Path::new(p))?)
}

/// Restore a SOnly, RepRec or ExpRec checkpoint trained on the same data.
///
/// # Safety
/// `ds` must be a live dataset, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_model_load(ds: *const FdrecDataset, path: *const c_char, out: *mut *mut FdrecModel) -> FdrecStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = handle(ds, "dataset")?;
        let ck = load_ck(path)?;
        let enc = &ds.enc;
        let (scorer, n): (Box<dyn Scorer + Send>, usize) = match ck.model.as_str() {
            SOnly::NAME => {
                let m = SOnly::from_checkpoint(&ck, enc)?;
                let n = m.parameter_count();
                (Box::new(m), n)
            }
            RepRec::NAME => {
                let m = RepRec::from_checkpoint(&ck, enc)?;
                let n = m.parameter_count();
                (Box::new(m), n)
            }
            ExpRec::NAME => {
                let m = ExpRec::from_checkpoint(&ck, enc)?;
                let n = m.parameter_count();
                (Box::new(m), n)
            }
            other => {
                return Err(fail(
                    FdrecStatus::Checkpoint,
                    format!("cannot load a {other} checkpoint here; use fdrec_model_load_ensemble for ensembles"),
                ))
            }
        };
        *out = model_of(ds, scorer, n);
        Ok(())
    })
}

/// Restore an ensemble together with its two base checkpoints.
///
/// # Safety
/// `ds` must be a live dataset, the paths NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_model_load_ensemble(
    ds: *const FdrecDataset,
    ensemble_path: *const c_char,
    reprec_path: *const c_char,
    exprec_path: *const c_char,
    out: *mut *mut FdrecModel,
) -> FdrecStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ds = handle(ds, "dataset")?;
        let enc = &ds.enc;
        let reprec = RepRec::from_checkpoint(&load_ck(reprec_path)?, enc)?;
        let exprec = ExpRec::from_checkpoint(&load_ck(exprec_path)?, enc)?;
        let m = Ensemble::from_checkpoint(&load_ck(ensemble_path)?, enc, reprec, exprec)?;
        let n = m.parameter_count() + m.reprec.parameter_count() + m.exprec.parameter_count();
        *out = model_of(ds, Box::new(m), n);
        Ok(())
    })
}

/// # Safety
/// `model` must come from a model constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fdrec_model_free(model: *mut FdrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count (bases included for an ensemble).
///
/// # Safety
/// `model` must be a live model; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_model_parameter_count(model: *const FdrecModel, out: *mut usize) -> FdrecStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.parameters;
        Ok(())
    })
}

fn same_vocab(model: &FdrecModel, ds: &FdrecDataset) -> Result<(), Failure> {
    if model.users != ds.enc.users || model.stores != ds.enc.stores {
        return Err(fail(FdrecStatus::InvalidArgument, "model was loaded for a different dataset"));
    }
    Ok(())
}

/// Score `n` candidate store indices for interaction `pos`.
///
/// # Safety
/// `candidates` must hold `n` values and `scores` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn fdrec_score(
    model: *const FdrecModel,
    ds: *const FdrecDataset,
    pos: usize,
    candidates: *const u32,
    n: usize,
    scores: *mut f64,
) -> FdrecStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "dataset")?;
        same_vocab(model, ds)?;
        if candidates.is_null() || scores.is_null() {
            return Err(fail(FdrecStatus::NullPointer, "candidates or scores is null"));
        }
        if pos >= ds.enc.len() {
            return Err(fail(FdrecStatus::InvalidArgument, format!("interaction {pos} out of range")));
        }
        let c = std::slice::from_raw_parts(candidates, n);
        if let Some(bad) = c.iter().find(|&&s| s as usize >= ds.enc.n_stores()) {
            return Err(fail(FdrecStatus::InvalidArgument, format!("store index {bad} out of range")));
        }
        let s = model.scorer.score(&ds.enc, pos, c)?;
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(&s);
        Ok(())
    })
}

/// HR@k and NDCG@k over all test cases of `protocol`.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdrec_evaluate(
    model: *const FdrecModel,
    ds: *const FdrecDataset,
    protocol: FdrecProtocol,
    seed: u64,
    k: usize,
    out: *mut FdrecMetrics,
) -> FdrecStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out, "out")?;
        same_vocab(model, ds)?;
        let p = match protocol {
            FdrecProtocol::Repeat => Protocol::Repeat,
            FdrecProtocol::Exploration => Protocol::Exploration,
            FdrecProtocol::Combined => Protocol::Combined,
        };
        if !model.scorer.supports(p) {
            return Err(fail(FdrecStatus::Unsupported, format!("model cannot score {} cases", p.name())));
        }
        if k == 0 {
            return Err(fail(FdrecStatus::InvalidArgument, "k must be positive"));
        }
        let cases = build_cases(&ds.enc, p, seed)?;
        let m = evaluate(model.scorer.as_ref(), &ds.enc, &cases, k)?;
        *out = FdrecMetrics {
            hr: m.hr,
            ndcg: m.ndcg,
            n: m.n,
        };
        Ok(())
    })
}

/// Run the command-line interface with `argc` arguments (program name first)
/// and return its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fdrec_run_cli(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    if argc > 0 {
        if argv.is_null() {
            set_error("argv is null");
            return 2;
        }
        for i in 0..argc as usize {
            match text(*argv.add(i), "argument") {
                Ok(s) => args.push(s.to_string()),
                Err(Failure(_, msg)) => {
                    set_error(&msg);
                    return 2;
                }
            }
        }
    }
    if args.is_empty() {
        args.push("fdrec".into());
    }
    catch_unwind(|| fdrec::cli::run(args)).unwrap_or_else(|_| {
        set_error("internal error: panic in command");
        1
    })
}
