mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::small_config;
use fssda_core::experiment::config::DEFAULT_CONFIG_TOML;
use fssda_core::experiment::{runner, ExperimentConfig};

fn tiny_overrides() -> Vec<&'static str> {
    vec![
        "benchmark.source_samples=200",
        "benchmark.target_samples=200",
        "federation.rounds=4",
        "experiment.seeds=[1, 2]",
    ]
}

/// Every file below `root`, keyed by its path relative to `root`.
fn read_tree(root: &Path, dir: &Path, out: &mut HashMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            read_tree(root, &path, out);
        } else {
            let key = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(key, fs::read(&path).unwrap());
        }
    }
}

#[test]
fn default_config_text_parses_to_defaults() {
    let parsed = ExperimentConfig::from_toml(DEFAULT_CONFIG_TOML, &[]).unwrap();
    assert_eq!(parsed, ExperimentConfig::default());
    assert_eq!(
        ExperimentConfig::from_toml("", &[]).unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn overrides_replace_single_keys() {
    let c = ExperimentConfig::from_toml(
        "",
        &["federation.rounds=7".into(), "pairs.1.scale=2.5".into()],
    )
    .unwrap();
    assert_eq!(c.federation.rounds, 7);
    assert_eq!(c.pairs[1].scale, 2.5);
    assert_eq!(c.pairs[0], ExperimentConfig::default().pairs[0]);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        "[federation]\nlearning_rate = -1.0",
        "[federation]\ntemperature = 0.0",
        "[federation]\nlambda = 1.5",
        "[benchmark]\nnum_classes = 1",
        "[experiment]\nseeds = []",
        "[federation]\nunknown_key = 3",
    ] {
        assert!(ExperimentConfig::from_toml(bad, &[]).is_err(), "{bad}");
    }
    // More labels than a class holds only shows up once the data exists.
    let mut c = small_config(1);
    c.benchmark.labeled_per_class = 1000;
    assert!(runner::run_experiment(&c, None).is_err());
}

#[test]
fn runs_are_byte_identical() {
    let config = small_config(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    runner::run_experiment(&config, Some(a.path())).unwrap();
    runner::run_experiment(&config, Some(b.path())).unwrap();
    let (mut ta, mut tb) = (HashMap::new(), HashMap::new());
    read_tree(a.path(), a.path(), &mut ta);
    read_tree(b.path(), b.path(), &mut tb);
    assert!(ta.len() > 2);
    assert_eq!(ta, tb);
}

#[test]
fn summary_matches_curve_files() {
    let config = small_config(5);
    let dir = tempfile::tempdir().unwrap();
    let report = runner::run_experiment(&config, Some(dir.path())).unwrap();

    let mut finals: HashMap<String, Vec<f64>> = HashMap::new();
    for record in &report.runs {
        let path = dir
            .path()
            .join("curves")
            .join(format!("{}.csv", record.run_id));
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let header = reader.headers().unwrap().clone();
        let col = header.iter().position(|h| h == "target_acc").unwrap();
        let last = reader
            .records()
            .map(|r| r.unwrap()[col].parse::<f64>().unwrap())
            .last()
            .unwrap();
        let key = format!("{},{},{}", record.method, record.pair, record.mode.name());
        finals.entry(key).or_default().push(last);
    }

    let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let mut rows = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let key = format!("{},{},{}", &row[0], &row[1], &row[2]);
        let values = &finals[&key];
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        assert_eq!(row[3].parse::<usize>().unwrap(), values.len());
        assert!((row[4].parse::<f64>().unwrap() - mean).abs() < 1e-9);
        assert!((row[5].parse::<f64>().unwrap() - var.sqrt()).abs() < 1e-9);
        rows += 1;
    }
    assert_eq!(rows, finals.len());
    assert_eq!(rows, 4 * 2 * 2);
}

#[test]
fn sweep_and_multisource_label_their_runs() {
    let config = small_config(3);
    let sweep = runner::run_lambda_sweep(&config, None).unwrap();
    for label in [
        "fssda-lambda-0.1",
        "fssda-lambda-0.5",
        "fssda-lambda-0.9",
        "fssda-adaptive",
    ] {
        assert!(
            sweep.summary.rows.iter().any(|r| r.method == label),
            "{label}"
        );
    }
    let multi = runner::run_multisource(&config, None).unwrap();
    for label in [
        "fssda-multisource",
        &runner::single_source_label("left"),
        &runner::single_source_label("right"),
    ] {
        assert!(
            multi.summary.rows.iter().any(|r| r.method == label),
            "{label}"
        );
    }
}

fn fssda() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fssda"))
}

#[test]
fn cli_prints_default_config() {
    let out = fssda().arg("print-default-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        ExperimentConfig::from_toml(&text, &[]).unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn cli_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = fssda();
    cmd.arg("run").arg("--out").arg(dir.path());
    for o in tiny_overrides() {
        cmd.arg("--set").arg(o);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("summary.csv").is_file());
    assert!(dir.path().join("summary.txt").is_file());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("fssda-serial"));
}

#[test]
fn cli_output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let mut cmd = fssda();
    cmd.arg("gen-data").env("FSSDA_OUTPUT_DIR", &target);
    for o in tiny_overrides() {
        cmd.arg("--set").arg(o);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("from-env"));
    assert!(target.join("data").is_dir());
}

#[test]
fn cli_reports_errors_with_failure_status() {
    let out = fssda()
        .args(["run", "--set", "federation.learning_rate=-1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .contains("learning_rate"));

    let out = fssda()
        .args(["run", "--config", "/nonexistent/fssda.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = fssda().arg("no-such-command").output().unwrap();
    assert!(!out.status.success());
}
