//! C interface to the simulator.
//!
//! Every function returns an [`FssdaStatus`]. On failure the message is
//! available from [`fssda_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fssda_core::distill::{self, FrankWolfeOptions};
use fssda_core::experiment::{runner, ExperimentConfig, Report};
use fssda_core::model::{self, ModelSpec, ParamVector};
use fssda_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FssdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ShapeMismatch = 4,
    Config = 5,
    Partition = 6,
    Io = 7,
    OutOfRange = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FssdaCommand {
    /// Every configured method on every pair, mode and seed.
    Run = 0,
    /// Fixed imitation weights against the adaptive rule.
    SweepLambda = 1,
    /// Multi-source training next to each single source.
    Multisource = 2,
}

/// Model shape. `hidden_dim` 0 selects the linear softmax model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FssdaModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// An experiment configuration.
pub struct FssdaConfig {
    text: String,
    overrides: Vec<String>,
    config: ExperimentConfig,
}

/// Results of a finished command.
pub struct FssdaReport {
    report: Report,
    summary_text: CString,
    methods: Vec<CString>,
    pairs: Vec<CString>,
    modes: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FssdaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) => FssdaStatus::ShapeMismatch,
            Error::Parameter(_) => FssdaStatus::InvalidArgument,
            Error::Partition { .. } => FssdaStatus::Partition,
            Error::Config { .. } => FssdaStatus::Config,
            Error::Io { .. } | Error::Csv(_) => FssdaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(FssdaStatus::NullPointer, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FssdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FssdaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            FssdaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FssdaStatus::InvalidUtf8, format!("`{name}`: {e}")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn model_spec(spec: &FssdaModelSpec) -> Result<ModelSpec, Failure> {
    Ok(ModelSpec::new(
        spec.input_dim,
        spec.hidden_dim,
        spec.num_classes,
    )?)
}

fn check_len(spec: ModelSpec, len: usize) -> Result<(), Failure> {
    if len != spec.num_params() {
        return Err(Failure(
            FssdaStatus::ShapeMismatch,
            format!(
                "gradient length {len}, model has {} parameters",
                spec.num_params()
            ),
        ));
    }
    Ok(())
}

fn params(spec: ModelSpec, values: &[f64]) -> Result<ParamVector, Failure> {
    Ok(ParamVector::from_vec(spec, values.to_vec())?)
}

/// Message for the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn fssda_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Number of parameters of a model of this shape.
///
/// # Safety
/// `spec` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fssda_model_num_params(
    spec: *const FssdaModelSpec,
    out: *mut usize,
) -> FssdaStatus {
    guard(|| {
        let spec = model_spec(spec.as_ref().ok_or_else(|| null("spec"))?)?;
        *out_arg(out, "out")? = spec.num_params();
        Ok(())
    })
}

/// The default configuration.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn fssda_config_default(out: *mut *mut FssdaConfig) -> FssdaStatus {
    fssda_config_from_toml(c"".as_ptr(), out)
}

/// Parses a TOML configuration; keys it omits take their defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fssda_config_from_toml(
    text: *const c_char,
    out: *mut *mut FssdaConfig,
) -> FssdaStatus {
    guard(|| {
        let text = str_arg(text, "text")?.to_string();
        let out = out_arg(out, "out")?;
        let config = ExperimentConfig::from_toml(&text, &[])?;
        *out = Box::into_raw(Box::new(FssdaConfig {
            text,
            overrides: Vec::new(),
            config,
        }));
        Ok(())
    })
}

/// Applies one `section.key=value` override. The handle is unchanged on error.
///
/// # Safety
/// `config` must be a live handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fssda_config_set(
    config: *mut FssdaConfig,
    assignment: *const c_char,
) -> FssdaStatus {
    guard(|| {
        let handle = config.as_mut().ok_or_else(|| null("config"))?;
        let assignment = str_arg(assignment, "assignment")?;
        let mut overrides = handle.overrides.clone();
        overrides.push(assignment.to_string());
        handle.config = ExperimentConfig::from_toml(&handle.text, &overrides)?;
        handle.overrides = overrides;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fssda_config_free(config: *mut FssdaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs a command. With a non-null `out_dir`, curve and summary files are
/// written there as the CLI would.
///
/// # Safety
/// `config` must be a live handle, `out_dir` null or a NUL-terminated path,
/// and `out` a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn fssda_run(
    config: *const FssdaConfig,
    command: FssdaCommand,
    out_dir: *const c_char,
    out: *mut *mut FssdaReport,
) -> FssdaStatus {
    guard(|| {
        let config = &config.as_ref().ok_or_else(|| null("config"))?.config;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(Path::new(str_arg(out_dir, "out_dir")?))
        };
        let out = out_arg(out, "out")?;
        let report = match command {
            FssdaCommand::Run => runner::run_experiment(config, dir)?,
            FssdaCommand::SweepLambda => runner::run_lambda_sweep(config, dir)?,
            FssdaCommand::Multisource => runner::run_multisource(config, dir)?,
        };
        let cstr = |s: &str| {
            CString::new(s).map_err(|e| Failure(FssdaStatus::InvalidArgument, e.to_string()))
        };
        let rows = &report.summary.rows;
        let boxed = FssdaReport {
            summary_text: cstr(&report.summary.to_text())?,
            methods: rows
                .iter()
                .map(|r| cstr(&r.method))
                .collect::<Result<_, _>>()?,
            pairs: rows
                .iter()
                .map(|r| cstr(&r.pair))
                .collect::<Result<_, _>>()?,
            modes: rows
                .iter()
                .map(|r| cstr(&r.mode))
                .collect::<Result<_, _>>()?,
            report,
        };
        *out = Box::into_raw(Box::new(boxed));
        Ok(())
    })
}

/// Number of summary rows, one per (method, pair, mode).
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fssda_report_row_count(
    report: *const FssdaReport,
    out: *mut usize,
) -> FssdaStatus {
    guard(|| {
        let report = report.as_ref().ok_or_else(|| null("report"))?;
        *out_arg(out, "out")? = report.report.summary.rows.len();
        Ok(())
    })
}

/// Labels and statistics of summary row `index`. The strings are owned by
/// the report. Any output pointer may be null to skip it.
///
/// # Safety
/// `report` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fssda_report_row(
    report: *const FssdaReport,
    index: usize,
    method: *mut *const c_char,
    pair: *mut *const c_char,
    mode: *mut *const c_char,
    seeds: *mut usize,
    mean_acc: *mut f64,
    std_acc: *mut f64,
) -> FssdaStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let row = r.report.summary.rows.get(index).ok_or_else(|| {
            Failure(
                FssdaStatus::OutOfRange,
                format!("row {index} of {}", r.report.summary.rows.len()),
            )
        })?;
        if let Some(p) = method.as_mut() {
            *p = r.methods[index].as_ptr();
        }
        if let Some(p) = pair.as_mut() {
            *p = r.pairs[index].as_ptr();
        }
        if let Some(p) = mode.as_mut() {
            *p = r.modes[index].as_ptr();
        }
        if let Some(p) = seeds.as_mut() {
            *p = row.finals.len();
        }
        if let Some(p) = mean_acc.as_mut() {
            *p = row.mean;
        }
        if let Some(p) = std_acc.as_mut() {
            *p = row.std;
        }
        Ok(())
    })
}

/// The summary as a text table, owned by the report.
///
/// # Safety
/// `report` must be a live handle; the result is null for a null handle.
#[no_mangle]
pub unsafe extern "C" fn fssda_report_summary_text(report: *const FssdaReport) -> *const c_char {
    report
        .as_ref()
        .map_or(ptr::null(), |r| r.summary_text.as_ptr())
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fssda_report_free(report: *mut FssdaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Hard-label weight λ minimizing `‖λ·g_hard + (1 − λ)·g_soft‖²` on [0, 1].
/// Both gradients hold `fssda_model_num_params(spec)` values.
///
/// # Safety
/// `spec` and `out` must be valid; each gradient must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn fssda_adaptive_lambda(
    spec: *const FssdaModelSpec,
    grad_hard: *const f64,
    grad_soft: *const f64,
    len: usize,
    out: *mut f64,
) -> FssdaStatus {
    guard(|| {
        let spec = model_spec(spec.as_ref().ok_or_else(|| null("spec"))?)?;
        check_len(spec, len)?;
        let gh = params(spec, slice_arg(grad_hard, len, "grad_hard")?)?;
        let gs = params(spec, slice_arg(grad_soft, len, "grad_soft")?)?;
        *out_arg(out, "out")? = distill::adaptive_lambda(&gh, &gs)?;
        Ok(())
    })
}

/// Simplex weights minimizing `‖Σ w_i g_i‖²` by Frank-Wolfe. `gradients`
/// holds `count` row-major vectors of `len` values; `weights_out` receives
/// `count` weights and `objective_out`, if non-null, the final objective.
///
/// # Safety
/// `spec` must be valid, `gradients` must point to `count * len` values and
/// `weights_out` to room for `count`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fssda_frank_wolfe(
    spec: *const FssdaModelSpec,
    gradients: *const f64,
    count: usize,
    len: usize,
    max_iters: usize,
    tol: f64,
    normalize: bool,
    weights_out: *mut f64,
    objective_out: *mut f64,
) -> FssdaStatus {
    guard(|| {
        let spec = model_spec(spec.as_ref().ok_or_else(|| null("spec"))?)?;
        check_len(spec, len)?;
        let total = count
            .checked_mul(len)
            .ok_or_else(|| Failure(FssdaStatus::InvalidArgument, "count * len overflows".into()))?;
        let flat = slice_arg(gradients, total, "gradients")?;
        let vectors = flat
            .chunks_exact(len)
            .map(|chunk| params(spec, chunk))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&ParamVector> = vectors.iter().collect();
        let options = FrankWolfeOptions {
            max_iters,
            tol,
            normalize,
        };
        let result = distill::frank_wolfe_simplex(&refs, &options)?;
        if weights_out.is_null() {
            return Err(null("weights_out"));
        }
        std::slice::from_raw_parts_mut(weights_out, count)
            .copy_from_slice(result.weights.lambdas());
        if let Some(o) = objective_out.as_mut() {
            *o = *result
                .objective_trace
                .last()
                .expect("trace starts non-empty");
        }
        Ok(())
    })
}

/// Row-wise softmax of `logits / temperature` for a `rows × cols` row-major
/// matrix. `out` may alias `logits`.
///
/// # Safety
/// `logits` and `out` must each point to `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn fssda_softmax_t(
    logits: *const f64,
    rows: usize,
    cols: usize,
    temperature: f64,
    out: *mut f64,
) -> FssdaStatus {
    guard(|| {
        let total = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(FssdaStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let z = slice_arg(logits, total, "logits")?.to_vec();
        let z = ndarray::Array2::from_shape_vec((rows, cols), z)
            .map_err(|e| Failure(FssdaStatus::ShapeMismatch, e.to_string()))?;
        let p = model::softmax_t(&z, temperature)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, total);
        for (d, v) in dst.iter_mut().zip(p.iter()) {
            *d = *v;
        }
        Ok(())
    })
}
