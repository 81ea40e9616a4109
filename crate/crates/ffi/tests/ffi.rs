use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fssda_core::distill::{self, FrankWolfeOptions};
use fssda_core::model::{ModelSpec, ParamVector};
use fssda_ffi::*;

fn last_error() -> String {
    let p = fssda_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn spec() -> FssdaModelSpec {
    FssdaModelSpec {
        input_dim: 3,
        hidden_dim: 0,
        num_classes: 2,
    }
}

fn grad(seed: u64) -> Vec<f64> {
    (0..8)
        .map(|i| (((i as u64 + 1) * (seed + 3)) % 7) as f64 - 3.0)
        .collect()
}

#[test]
fn adaptive_lambda_matches_core() {
    let (gh, gs) = (grad(1), grad(2));
    let mut out = f64::NAN;
    let status = unsafe { fssda_adaptive_lambda(&spec(), gh.as_ptr(), gs.as_ptr(), 8, &mut out) };
    assert_eq!(status, FssdaStatus::Ok);
    let s = ModelSpec::linear(3, 2).unwrap();
    let expected = distill::adaptive_lambda(
        &ParamVector::from_vec(s, gh).unwrap(),
        &ParamVector::from_vec(s, gs).unwrap(),
    )
    .unwrap();
    assert_eq!(out, expected);
}

#[test]
fn frank_wolfe_matches_core() {
    let flat: Vec<f64> = (1..=3).flat_map(grad).collect();
    let mut weights = [0.0; 3];
    let mut objective = f64::NAN;
    let status = unsafe {
        fssda_frank_wolfe(
            &spec(),
            flat.as_ptr(),
            3,
            8,
            100,
            1e-6,
            false,
            weights.as_mut_ptr(),
            &mut objective,
        )
    };
    assert_eq!(status, FssdaStatus::Ok);
    let s = ModelSpec::linear(3, 2).unwrap();
    let vs: Vec<ParamVector> = (1..=3)
        .map(|k| ParamVector::from_vec(s, grad(k)).unwrap())
        .collect();
    let refs: Vec<&ParamVector> = vs.iter().collect();
    let res = distill::frank_wolfe_simplex(&refs, &FrankWolfeOptions::default()).unwrap();
    assert_eq!(&weights[..], res.weights.lambdas());
    assert_eq!(objective, *res.objective_trace.last().unwrap());
}

#[test]
fn softmax_rows_sum_to_one_and_may_alias() {
    let mut buf = [1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
    let p = buf.as_mut_ptr();
    assert_eq!(unsafe { fssda_softmax_t(p, 2, 3, 2.0, p) }, FssdaStatus::Ok);
    for row in buf.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(
        unsafe { fssda_softmax_t(p, 2, 3, 0.0, p) },
        FssdaStatus::InvalidArgument
    );
    assert!(last_error().contains("temperature"));
}

#[test]
fn errors_map_to_status_codes() {
    let g = grad(1);
    let mut out = 0.0;
    let st = unsafe { fssda_adaptive_lambda(&spec(), g.as_ptr(), ptr::null(), 8, &mut out) };
    assert_eq!(st, FssdaStatus::NullPointer);
    assert!(last_error().contains("grad_soft"));

    let st = unsafe { fssda_adaptive_lambda(&spec(), g.as_ptr(), g.as_ptr(), 7, &mut out) };
    assert_eq!(st, FssdaStatus::ShapeMismatch);

    let bad_spec = FssdaModelSpec {
        num_classes: 1,
        ..spec()
    };
    let st = unsafe { fssda_adaptive_lambda(&bad_spec, g.as_ptr(), g.as_ptr(), 8, &mut out) };
    assert_eq!(st, FssdaStatus::InvalidArgument);

    let mut weights = [0.0; 1];
    let st = unsafe {
        fssda_frank_wolfe(
            &spec(),
            g.as_ptr(),
            1,
            8,
            10,
            1e-6,
            false,
            weights.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FssdaStatus::InvalidArgument);

    let invalid = [0xffu8, 0];
    let mut config = ptr::null_mut();
    let st = unsafe { fssda_config_from_toml(invalid.as_ptr() as *const c_char, &mut config) };
    assert_eq!(st, FssdaStatus::InvalidUtf8);
    assert!(config.is_null());
}

#[test]
fn config_set_is_transactional() {
    let mut config = ptr::null_mut();
    let text = CString::new("[federation]\nrounds = 3").unwrap();
    assert_eq!(
        unsafe { fssda_config_from_toml(text.as_ptr(), &mut config) },
        FssdaStatus::Ok
    );
    let bad = CString::new("federation.learning_rate=-1").unwrap();
    assert_eq!(
        unsafe { fssda_config_set(config, bad.as_ptr()) },
        FssdaStatus::Config
    );
    let seeds = CString::new("experiment.seeds=[4]").unwrap();
    assert_eq!(
        unsafe { fssda_config_set(config, seeds.as_ptr()) },
        FssdaStatus::Ok
    );
    for o in [
        "benchmark.source_samples=200",
        "benchmark.target_samples=200",
        "experiment.modes=[\"non-iid\"]",
    ] {
        let o = CString::new(o).unwrap();
        assert_eq!(
            unsafe { fssda_config_set(config, o.as_ptr()) },
            FssdaStatus::Ok
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut report = ptr::null_mut();
    let st = unsafe {
        fssda_run(
            config,
            FssdaCommand::SweepLambda,
            out_dir.as_ptr(),
            &mut report,
        )
    };
    assert_eq!(st, FssdaStatus::Ok);
    assert!(dir.path().join("summary.csv").is_file());

    let mut rows = 0;
    assert_eq!(
        unsafe { fssda_report_row_count(report, &mut rows) },
        FssdaStatus::Ok
    );
    assert_eq!(rows, 8);
    let (mut method, mut mode, mut seeds) = (ptr::null(), ptr::null(), 0usize);
    let st = unsafe {
        fssda_report_row(
            report,
            3,
            &mut method,
            ptr::null_mut(),
            &mut mode,
            &mut seeds,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FssdaStatus::Ok);
    assert_eq!(
        unsafe { CStr::from_ptr(method) }.to_str().unwrap(),
        "fssda-adaptive"
    );
    assert_eq!(unsafe { CStr::from_ptr(mode) }.to_str().unwrap(), "non-iid");
    assert_eq!(seeds, 1);
    let st = unsafe {
        fssda_report_row(
            report,
            rows,
            &mut method,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FssdaStatus::OutOfRange);
    assert!(!unsafe { fssda_report_summary_text(report) }.is_null());

    unsafe {
        fssda_report_free(report);
        fssda_config_free(config);
        fssda_report_free(ptr::null_mut());
        fssda_config_free(ptr::null_mut());
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn static_lib() -> Option<PathBuf> {
    // CARGO_TARGET_TMPDIR is <target>/tmp; the library sits in the profile dir.
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent()?;
    ["debug", "release"]
        .iter()
        .map(|p| target.join(p).join("libfssda_ffi.a"))
        .filter(|p| p.is_file())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(crate_dir().join("include/fssda.h")).unwrap();
    for name in [
        "fssda_last_error_message",
        "fssda_config_default",
        "fssda_config_from_toml",
        "fssda_config_set",
        "fssda_config_free",
        "fssda_run",
        "fssda_report_row_count",
        "fssda_report_row",
        "fssda_report_summary_text",
        "fssda_report_free",
        "fssda_adaptive_lambda",
        "fssda_frank_wolfe",
        "fssda_softmax_t",
        "typedef struct FssdaConfig FssdaConfig;",
        "typedef struct FssdaReport FssdaReport;",
        "FSSDA_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        panic!(
            "libfssda_ffi.a not found next to {}",
            env!("CARGO_TARGET_TMPDIR")
        );
    };
    let exe = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fssda_c_smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .expect("a C compiler named `cc`");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("fssda-serial"));
}
