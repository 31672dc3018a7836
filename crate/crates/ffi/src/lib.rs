//! C ABI over the devfp toolkit.
//!
//! Objects are opaque handles created by `devfp_*_new`/`_load`/`_train` and
//! released with the matching `_free`. Every fallible call returns a
//! [`DevfpStatus`]; on failure `devfp_last_error` describes the cause for
//! the calling thread. Strings cross the boundary as NUL-terminated UTF-8.

use devfp::fingerprint::{self, ForestModel, ForestParams, LabeledSample, SampleJob};
use devfp::fpnum::{self, AccumulatorSpec, ReductionStrategy};
use devfp::harness::{self, Experiment, ExperimentSpec};
use devfp::prompts::{GenParams, PromptSuite, SuiteCounts};
use devfp::systems::{self, Axis, SimulatedSystem, SystemConfig, Zoo};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevfpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    UnknownConfig = 4,
    BufferTooSmall = 5,
    Io = 6,
    Failed = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevfpAxis {
    Engine = 0,
    Backend = 1,
    Hardware = 2,
}

impl From<DevfpAxis> for Axis {
    fn from(a: DevfpAxis) -> Self {
        match a {
            DevfpAxis::Engine => Axis::Engine,
            DevfpAxis::Backend => Axis::Backend,
            DevfpAxis::Hardware => Axis::Hardware,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevfpReduction {
    Sequential = 0,
    Reversed = 1,
    Pairwise = 2,
    /// Uses the `tile` argument.
    Blocked = 3,
    Kahan = 4,
}

/// A prompt suite.
pub struct DevfpSuite(PromptSuite);
/// One simulated inference system.
pub struct DevfpSystem(SimulatedSystem);
/// Labelled feature vectors accumulated from collections.
pub struct DevfpDataset(Vec<LabeledSample>);
/// A trained random forest for one axis.
pub struct DevfpForest(ForestModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(DevfpStatus, String);

impl Failure {
    fn new(status: DevfpStatus, msg: impl ToString) -> Self {
        Self(status, msg.to_string())
    }
}

macro_rules! failed {
    ($e:expr) => {
        |err| Failure::new($e, err)
    };
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DevfpStatus {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure::new(DevfpStatus::Panic, msg))
    });
    match result {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            DevfpStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(
            DevfpStatus::NullPointer,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(DevfpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(DevfpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(DevfpStatus::NullPointer, format!("{what} is null")))
}

/// Copies `s` plus a NUL into `buf`. `needed` (if non-null) receives the
/// full size including the NUL, also when the buffer is too small.
unsafe fn write_str(
    s: &str,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> Result<(), Failure> {
    if let Some(n) = needed.as_mut() {
        *n = s.len() + 1;
    }
    if buf.is_null() || len < s.len() + 1 {
        return Err(Failure::new(
            DevfpStatus::BufferTooSmall,
            format!("need {} bytes", s.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

fn into_handle<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// message length plus one (the size needed), or 1 when there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn devfp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Number of valid system configs in the built-in zoo.
#[no_mangle]
pub extern "C" fn devfp_zoo_len() -> usize {
    Zoo::builtin().valid_configs().len()
}

/// Writes the id (`ENGINE/BACKEND/HARDWARE`) of config `index`.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_zoo_config(
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> DevfpStatus {
    guard(|| {
        let cfgs = Zoo::builtin().valid_configs();
        let cfg = cfgs.get(index).ok_or_else(|| {
            Failure::new(
                DevfpStatus::InvalidArgument,
                format!("index {index} out of range"),
            )
        })?;
        write_str(&cfg.id(), buf, len, needed)
    })
}

/// Sum of `n` values under a reduction order with a 32-bit accumulator.
///
/// # Safety
/// `values` must be valid for `n` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_reduce(
    values: *const f32,
    n: usize,
    strategy: DevfpReduction,
    tile: usize,
    out: *mut f32,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let values = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(handle(values, "values")?, n)
        };
        *out = fpnum::reduce(values, strategy_of(strategy, tile)?, AccumulatorSpec::F32);
        Ok(())
    })
}

/// `tr(AᵀB)` for `n×n` constant matrices. `wide` selects a 64-bit
/// accumulator.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_trace_demo(
    n: usize,
    a: f32,
    b: f32,
    strategy: DevfpReduction,
    tile: usize,
    wide: bool,
    out: *mut f32,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if n == 0 {
            return Err(Failure::new(
                DevfpStatus::InvalidArgument,
                "n must be positive",
            ));
        }
        let acc = if wide {
            AccumulatorSpec::F64
        } else {
            AccumulatorSpec::F32
        };
        *out = fpnum::trace_demo(n, a, b, strategy_of(strategy, tile)?, acc);
        Ok(())
    })
}

fn strategy_of(s: DevfpReduction, tile: usize) -> Result<ReductionStrategy, Failure> {
    Ok(match s {
        DevfpReduction::Sequential => ReductionStrategy::Sequential,
        DevfpReduction::Reversed => ReductionStrategy::Reversed,
        DevfpReduction::Pairwise => ReductionStrategy::Pairwise,
        DevfpReduction::Kahan => ReductionStrategy::Kahan,
        DevfpReduction::Blocked => {
            ReductionStrategy::blocked(tile).map_err(failed!(DevfpStatus::InvalidArgument))?
        }
    })
}

/// Generates a margin-targeted suite against every zoo system.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_suite_generate(
    p1: usize,
    p2: usize,
    p3: usize,
    p4: usize,
    seed: u64,
    model_seed: u64,
    out: *mut *mut DevfpSuite,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = systems::default_model(model_seed);
        let refs = Zoo::builtin().instantiate_all(&model);
        let counts = SuiteCounts { p1, p2, p3, p4 };
        let suite = PromptSuite::generate(counts, seed, &refs, GenParams::default())
            .map_err(failed!(DevfpStatus::InvalidArgument))?;
        *out = into_handle(DevfpSuite(suite));
        Ok(())
    })
}

/// Reads a JSON Lines suite.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_suite_load(
    path: *const c_char,
    out: *mut *mut DevfpSuite,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let suite = PromptSuite::load(path.as_ref()).map_err(failed!(DevfpStatus::Io))?;
        *out = into_handle(DevfpSuite(suite));
        Ok(())
    })
}

/// # Safety
/// `suite` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn devfp_suite_save(
    suite: *const DevfpSuite,
    path: *const c_char,
) -> DevfpStatus {
    guard(|| {
        let suite = handle(suite, "suite")?;
        let path = str_arg(path, "path")?;
        suite
            .0
            .save(path.as_ref())
            .map_err(failed!(DevfpStatus::Io))
    })
}

/// Number of prompts, or 0 for a null handle.
///
/// # Safety
/// `suite` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn devfp_suite_len(suite: *const DevfpSuite) -> usize {
    suite.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `suite` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn devfp_suite_free(suite: *mut DevfpSuite) {
    free_handle(suite)
}

/// Instantiates config `id` over the model of `model_seed`, with logit
/// noise `sigma` (0 for none).
///
/// # Safety
/// `id` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_system_new(
    id: *const c_char,
    model_seed: u64,
    sigma: f32,
    out: *mut *mut DevfpSystem,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let id = str_arg(id, "id")?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Failure::new(
                DevfpStatus::InvalidArgument,
                "sigma must be finite and >= 0",
            ));
        }
        let cfg = SystemConfig::parse(id)
            .filter(|c| Zoo::builtin().is_valid(c))
            .ok_or_else(|| {
                Failure::new(DevfpStatus::UnknownConfig, format!("unknown config '{id}'"))
            })?;
        let system =
            systems::instantiate(&cfg, model_seed).map_err(failed!(DevfpStatus::UnknownConfig))?;
        *out = into_handle(DevfpSystem(system.with_mitigation(sigma)));
        Ok(())
    })
}

/// # Safety
/// `system` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn devfp_system_free(system: *mut DevfpSystem) {
    free_handle(system)
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_dataset_new(out: *mut *mut DevfpDataset) -> DevfpStatus {
    guard(|| {
        *out_ptr(out, "out")? = into_handle(DevfpDataset(Vec::new()));
        Ok(())
    })
}

/// Queries `system` for replicates `first..first+count` of every prompt
/// and appends the labelled feature vectors to `dataset`.
///
/// # Safety
/// All handles must be live.
#[no_mangle]
pub unsafe extern "C" fn devfp_dataset_collect(
    dataset: *mut DevfpDataset,
    system: *const DevfpSystem,
    suite: *const DevfpSuite,
    temperature: f32,
    seed: u64,
    first: u64,
    count: u64,
    batch_size: usize,
) -> DevfpStatus {
    guard(|| {
        let dataset = out_ptr(dataset, "dataset")?;
        let system = handle(system, "system")?;
        let suite = handle(suite, "suite")?;
        if count == 0 || batch_size == 0 || !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Failure::new(
                DevfpStatus::InvalidArgument,
                "count and batch_size must be positive, temperature finite and >= 0",
            ));
        }
        let job = SampleJob {
            temperature,
            seed,
            replicates: first..first + count,
        };
        let xs = fingerprint::collect_jobs(&system.0, &suite.0, &[job], batch_size)
            .map_err(failed!(DevfpStatus::Failed))?
            .remove(0);
        dataset
            .0
            .extend(fingerprint::label_samples(&system.0.config, xs, first));
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn devfp_dataset_len(dataset: *const DevfpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Writes the dataset as CSV.
///
/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn devfp_dataset_save(
    dataset: *const DevfpDataset,
    path: *const c_char,
) -> DevfpStatus {
    guard(|| {
        let dataset = handle(dataset, "dataset")?;
        let path = str_arg(path, "path")?;
        let f = std::fs::File::create(path).map_err(failed!(DevfpStatus::Io))?;
        fingerprint::write_dataset(f, &dataset.0).map_err(failed!(DevfpStatus::Io))
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn devfp_dataset_free(dataset: *mut DevfpDataset) {
    free_handle(dataset)
}

/// Trains a forest of `n_trees` trees for `axis`.
///
/// # Safety
/// `dataset` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_forest_train(
    dataset: *const DevfpDataset,
    axis: DevfpAxis,
    n_trees: usize,
    seed: u64,
    out: *mut *mut DevfpForest,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dataset = handle(dataset, "dataset")?;
        let params = ForestParams {
            n_trees,
            seed,
            ..ForestParams::default()
        };
        let model = fingerprint::train_forest(&dataset.0, axis.into(), &params)
            .map_err(failed!(DevfpStatus::InvalidArgument))?;
        *out = into_handle(DevfpForest(model));
        Ok(())
    })
}

/// Serialises the forest as JSON into `buf`.
///
/// # Safety
/// `forest` must be a live handle; `buf` null or valid for `len` bytes;
/// `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_forest_to_json(
    forest: *const DevfpForest,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> DevfpStatus {
    guard(|| {
        let forest = handle(forest, "forest")?;
        let json = forest.0.to_json().map_err(failed!(DevfpStatus::Failed))?;
        write_str(&json, buf, len, needed)
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_forest_from_json(
    json: *const c_char,
    out: *mut *mut DevfpForest,
) -> DevfpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let json = str_arg(json, "json")?;
        let model = ForestModel::from_json(json).map_err(failed!(DevfpStatus::InvalidArgument))?;
        *out = into_handle(DevfpForest(model));
        Ok(())
    })
}

/// # Safety
/// `forest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn devfp_forest_free(forest: *mut DevfpForest) {
    free_handle(forest)
}

/// Queries `target` `k` times and writes the forest's majority label.
///
/// # Safety
/// All handles must be live; `buf` null or valid for `len` bytes; `needed`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn devfp_fingerprint(
    target: *const DevfpSystem,
    suite: *const DevfpSuite,
    forest: *const DevfpForest,
    k: usize,
    temperature: f32,
    seed: u64,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> DevfpStatus {
    guard(|| {
        let target = handle(target, "target")?;
        let suite = handle(suite, "suite")?;
        let forest = handle(forest, "forest")?;
        let votes = fingerprint::fingerprint_target(
            &target.0,
            &suite.0,
            k,
            std::slice::from_ref(&forest.0),
            temperature,
            seed,
        )
        .map_err(failed!(DevfpStatus::InvalidArgument))?;
        let winner = votes
            .into_values()
            .next()
            .map(|v| v.winner)
            .ok_or_else(|| Failure::new(DevfpStatus::Failed, "no vote"))?;
        write_str(&winner, buf, len, needed)
    })
}

/// Runs an experiment (`closed-world`, `k-sweep`, ...) with its defaults
/// overlaid by `spec_json` (may be null) and writes its CSV, JSON and plot
/// files under `out_dir`.
///
/// # Safety
/// `name` and `out_dir` must be NUL-terminated strings; `spec_json` null or
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn devfp_run_experiment(
    name: *const c_char,
    spec_json: *const c_char,
    out_dir: *const c_char,
) -> DevfpStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let exp: Experiment = name
            .parse()
            .map_err(failed!(DevfpStatus::InvalidArgument))?;
        let overlay = if spec_json.is_null() {
            None
        } else {
            Some(str_arg(spec_json, "spec_json")?)
        };
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let spec = ExperimentSpec::load(exp, false, overlay)
            .map_err(failed!(DevfpStatus::InvalidArgument))?;
        let report = harness::run(&spec).map_err(failed!(DevfpStatus::Failed))?;
        report.write(&dir).map_err(failed!(DevfpStatus::Io))?;
        Ok(())
    })
}
