//! C ABI over the `lifelong` crate.
//!
//! Every fallible function returns an [`LlStatus`]; on failure the message
//! is kept per thread and read back with [`ll_last_error_message`]. Handles
//! are opaque pointers created by `*_new`/`*_load` functions and released by
//! the matching `*_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lifelong::baselines::gem_project;
use lifelong::corpus::{avg_jaccard, gen_synthetic, SynthConfig, TaskStream};
use lifelong::eval::f1_scores;
use lifelong::memory::MemoryStore;
use lifelong::model::{kl_diag, DiagGaussian};
use lifelong::runner::{load_stream, run_experiment, ExperimentConfig};
use lifelong::soinn::{Metric, SoinnConfig, SoinnNetwork};
use lifelong::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Contract = 5,
    Config = 6,
    Data = 7,
    Checkpoint = 8,
    Io = 9,
    /// A run stopped early and can be resumed.
    Halted = 10,
    Panic = 11,
    Other = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LlMetric {
    Euclidean = 0,
    Cosine = 1,
}

pub struct LlSoinn(SoinnNetwork);
pub struct LlMemory(MemoryStore);
pub struct LlStream(TaskStream);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LlStatus {
    match e {
        Error::Dimension { .. } => LlStatus::Dimension,
        Error::NonFinite { .. } => LlStatus::NonFinite,
        Error::Contract(_) | Error::Degenerate(_) => LlStatus::Contract,
        Error::Config { .. } => LlStatus::Config,
        Error::Ingest { .. } | Error::MissingField { .. } | Error::Stream { .. } => LlStatus::Data,
        Error::Checkpoint(_) => LlStatus::Checkpoint,
        Error::Io(_) => LlStatus::Io,
        Error::Halted { .. } => LlStatus::Halted,
        _ => LlStatus::Other,
    }
}

struct Fail(LlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LlStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(LlStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn deref<'a, T>(h: *const T) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null("handle"))
}

unsafe fn deref_mut<'a, T>(h: *mut T) -> Result<&'a mut T, Fail> {
    h.as_mut().ok_or_else(|| null("handle"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ll_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminator; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn ll_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (truncated, always terminated
/// when `len > 0`). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn ll_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// `KL(q || p)` between diagonal Gaussians of dimension `dim`.
#[no_mangle]
pub unsafe extern "C" fn ll_kl_diag(
    mu_q: *const f64,
    logvar_q: *const f64,
    mu_p: *const f64,
    logvar_p: *const f64,
    dim: usize,
    out_kl: *mut f64,
) -> LlStatus {
    guard(|| {
        let q = DiagGaussian::new(slice(mu_q, dim, "mu_q")?.to_vec(), slice(logvar_q, dim, "logvar_q")?.to_vec())?;
        let p = DiagGaussian::new(slice(mu_p, dim, "mu_p")?.to_vec(), slice(logvar_p, dim, "logvar_p")?.to_vec())?;
        *out(out_kl, "out_kl")? = kl_diag(&q, &p)?;
        Ok(())
    })
}

/// Macro and micro F1; macro averages over the `n_classes` ids in `classes`.
#[no_mangle]
pub unsafe extern "C" fn ll_f1_scores(
    golds: *const usize,
    preds: *const usize,
    n: usize,
    classes: *const usize,
    n_classes: usize,
    out_macro: *mut f64,
    out_micro: *mut f64,
) -> LlStatus {
    guard(|| {
        let (ma, mi) = f1_scores(
            slice(golds, n, "golds")?,
            slice(preds, n, "preds")?,
            slice(classes, n_classes, "classes")?,
        )?;
        *out(out_macro, "out_macro")? = ma;
        *out(out_micro, "out_micro")? = mi;
        Ok(())
    })
}

/// Projects `g` (length `dim`) onto `{v : <v, g_k> >= 0}` where the `k`
/// constraint gradients are stored row-major in `constraints`.
#[no_mangle]
pub unsafe extern "C" fn ll_gem_project(
    g: *const f64,
    dim: usize,
    constraints: *const f64,
    k: usize,
    out_v: *mut f64,
) -> LlStatus {
    guard(|| {
        let g = slice(g, dim, "g")?;
        let flat = slice(constraints, dim * k, "constraints")?;
        let cons: Vec<Vec<f64>> = flat.chunks(dim.max(1)).take(k).map(<[f64]>::to_vec).collect();
        let v = gem_project(g, &cons)?;
        slice_mut(out_v, dim, "out_v")?.copy_from_slice(&v);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_soinn_new(lambda: usize, eta: f64, metric: LlMetric, out_handle: *mut *mut LlSoinn) -> LlStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let config = SoinnConfig {
            lambda,
            eta,
            metric: match metric {
                LlMetric::Euclidean => Metric::Euclidean,
                LlMetric::Cosine => Metric::Cosine,
            },
        };
        *slot = Box::into_raw(Box::new(LlSoinn(SoinnNetwork::new(config)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_soinn_free(handle: *mut LlSoinn) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Presents one labeled input. `out_node` receives the node it was assigned
/// to and `out_created` whether that node is new; either may be null.
#[no_mangle]
pub unsafe extern "C" fn ll_soinn_present(
    handle: *mut LlSoinn,
    z: *const f64,
    dim: usize,
    label: usize,
    sample_id: usize,
    out_node: *mut usize,
    out_created: *mut bool,
) -> LlStatus {
    guard(|| {
        let net = deref_mut(handle)?;
        let a = net.0.present(slice(z, dim, "z")?, label, sample_id)?;
        if let Some(n) = out_node.as_mut() {
            *n = a.node;
        }
        if let Some(c) = out_created.as_mut() {
            *c = a.created;
        }
        Ok(())
    })
}

/// Ends the current winning period.
#[no_mangle]
pub unsafe extern "C" fn ll_soinn_close_period(handle: *mut LlSoinn) -> LlStatus {
    guard(|| {
        deref_mut(handle)?.0.close_period();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_soinn_node_count(handle: *const LlSoinn, out_count: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_count, "out_count")? = deref(handle)?.0.nodes().len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_soinn_edge_count(handle: *const LlSoinn, out_count: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_count, "out_count")? = deref(handle)?.0.edge_count();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_soinn_sample_density(handle: *const LlSoinn, sample_id: usize, out_density: *mut f64) -> LlStatus {
    guard(|| {
        *out(out_density, "out_density")? = deref(handle)?.0.sample_density(sample_id)?;
        Ok(())
    })
}

/// Writes the `n` sample ids in `ids` to `out_ids` ordered by importance.
#[no_mangle]
pub unsafe extern "C" fn ll_soinn_rank(handle: *const LlSoinn, ids: *const usize, n: usize, out_ids: *mut usize) -> LlStatus {
    guard(|| {
        let ranked = deref(handle)?.0.rank_samples(slice(ids, n, "ids")?)?;
        slice_mut(out_ids, n, "out_ids")?.copy_from_slice(&ranked);
        Ok(())
    })
}

/// Loads a memory store written by a run (`memory_task{t}.json`).
#[no_mangle]
pub unsafe extern "C" fn ll_memory_load(path_utf8: *const c_char, out_handle: *mut *mut LlMemory) -> LlStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let store = MemoryStore::load(&path(path_utf8)?)?;
        *slot = Box::into_raw(Box::new(LlMemory(store)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_memory_new(capacity: usize) -> *mut LlMemory {
    Box::into_raw(Box::new(LlMemory(MemoryStore::new(capacity))))
}

#[no_mangle]
pub unsafe extern "C" fn ll_memory_free(handle: *mut LlMemory) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ll_memory_len(handle: *const LlMemory, out_len: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(handle)?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_memory_capacity(handle: *const LlMemory, out_capacity: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_capacity, "out_capacity")? = deref(handle)?.0.capacity();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_memory_tasks(handle: *const LlMemory, out_tasks: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_tasks, "out_tasks")? = deref(handle)?.0.tasks_written();
        Ok(())
    })
}

/// Slots held for zero-based task `task`.
#[no_mangle]
pub unsafe extern "C" fn ll_memory_task_len(handle: *const LlMemory, task: usize, out_len: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(handle)?.0.task_slots(task).len();
        Ok(())
    })
}

/// Per-task quota `floor(M / t)` after `t` tasks.
#[no_mangle]
pub unsafe extern "C" fn ll_memory_quota(handle: *const LlMemory, t: usize, out_quota: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_quota, "out_quota")? = deref(handle)?.0.quota(t);
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LlSynthConfig {
    pub tasks: usize,
    pub groups_per_task: usize,
    pub vocab_per_task: usize,
    pub overlap: f64,
    pub train_per_task: usize,
    pub dev_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

#[no_mangle]
pub unsafe extern "C" fn ll_stream_synthetic(config: *const LlSynthConfig, out_handle: *mut *mut LlStream) -> LlStatus {
    guard(|| {
        let c = *deref(config)?;
        let slot = out(out_handle, "out_handle")?;
        let mut synth = SynthConfig::new(c.tasks, c.groups_per_task, c.vocab_per_task, c.overlap, c.seed);
        synth.train_per_task = c.train_per_task;
        synth.dev_per_task = c.dev_per_task;
        synth.test_per_task = c.test_per_task;
        *slot = Box::into_raw(Box::new(LlStream(gen_synthetic(&synth)?)));
        Ok(())
    })
}

/// Loads the data section of an experiment config (JSONL or synthetic).
#[no_mangle]
pub unsafe extern "C" fn ll_stream_from_config(config_path: *const c_char, out_handle: *mut *mut LlStream) -> LlStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        let cfg = ExperimentConfig::load(&path(config_path)?)?;
        *slot = Box::into_raw(Box::new(LlStream(load_stream(&cfg)?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_stream_free(handle: *mut LlStream) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ll_stream_task_count(handle: *const LlStream, out_count: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_count, "out_count")? = deref(handle)?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_stream_group_count(handle: *const LlStream, out_count: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_count, "out_count")? = deref(handle)?.0.groups.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_stream_vocab_size(handle: *const LlStream, out_size: *mut usize) -> LlStatus {
    guard(|| {
        *out(out_size, "out_size")? = deref(handle)?.0.vocab.len();
        Ok(())
    })
}

/// Mean top-`topk` Jaccard overlap per task; `out` must hold one value per task.
#[no_mangle]
pub unsafe extern "C" fn ll_stream_avg_jaccard(handle: *const LlStream, topk: usize, out_values: *mut f64, len: usize) -> LlStatus {
    guard(|| {
        let values = avg_jaccard(&deref(handle)?.0, topk)?;
        if len != values.len() {
            return Err(Fail(
                LlStatus::InvalidArgument,
                format!("output holds {len} values but the stream has {} tasks", values.len()),
            ));
        }
        slice_mut(out_values, len, "out_values")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Runs the experiment described by a TOML config file.
#[no_mangle]
pub unsafe extern "C" fn ll_run_config(config_path: *const c_char, resume: bool) -> LlStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&path(config_path)?)?;
        run_experiment(&cfg, resume)?;
        Ok(())
    })
}
