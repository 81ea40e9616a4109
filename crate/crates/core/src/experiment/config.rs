//! TOML run configuration with `section.key=value` overrides.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MixtureSpec, ShiftSpec};
use crate::distill::FrankWolfeOptions;
use crate::error::{Error, Result};
use crate::federation::{Aggregation, FederationConfig, LambdaMode, Schedule, SerialOptions};

/// Overrides `experiment.output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "FSSDA_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fssda,
    FssdaSerial,
    Floly,
    Ssdaonly,
    FssdaMultisource,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fssda => "fssda",
            Method::FssdaSerial => "fssda-serial",
            Method::Floly => "floly",
            Method::Ssdaonly => "ssdaonly",
            Method::FssdaMultisource => "fssda-multisource",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Iid,
    NonIid,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Iid => "iid",
            Mode::NonIid => "non-iid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Fixed(f64),
    Named(NamedLambda),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedLambda {
    Adaptive,
}

impl LambdaSetting {
    pub fn mode(self) -> LambdaMode {
        match self {
            LambdaSetting::Fixed(l) => LambdaMode::Fixed(l),
            LambdaSetting::Named(NamedLambda::Adaptive) => LambdaMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationSetting {
    Uniform,
    SampleWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// 0 selects a linear softmax model.
    pub hidden_dim: usize,
    pub class_separation: f64,
    pub class_std: f64,
    /// Pool size per source domain, before the test split.
    pub source_samples: usize,
    /// Pool size of the target domain, before the test split.
    pub target_samples: usize,
    pub test_fraction: f64,
    /// Labeled target training samples per class, over all devices together.
    pub labeled_per_class: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            feature_dim: 16,
            hidden_dim: 0,
            class_separation: 2.0,
            class_std: 1.0,
            source_samples: 1000,
            target_samples: 1000,
            test_fraction: 0.3,
            labeled_per_class: 3,
        }
    }
}

impl BenchmarkConfig {
    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            class_separation: self.class_separation,
            class_std: self.class_std,
        }
    }
}

/// A named domain shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub name: String,
    /// Radians.
    #[serde(default)]
    pub rotation: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub translation: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl ShiftConfig {
    pub fn new(name: &str, rotation: f64, scale: f64, noise: f64) -> Self {
        Self {
            name: name.into(),
            rotation,
            scale,
            noise,
            translation: Vec::new(),
        }
    }

    pub fn shift(&self) -> ShiftSpec {
        ShiftSpec {
            rotation: self.rotation,
            translation: self.translation.clone(),
            scale: self.scale,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_devices: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub lambda: LambdaSetting,
    pub aggregation: AggregationSetting,
    /// 0 trains full-batch.
    pub batch_size: usize,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub record_wall_time: bool,
    pub frank_wolfe_max_iters: usize,
    pub frank_wolfe_tol: f64,
    pub frank_wolfe_normalize: bool,
    pub serial_tolerance_pp: f64,
    pub serial_patience: usize,
    pub serial_max_source_rounds: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let fw = FrankWolfeOptions::default();
        let serial = SerialOptions::default();
        Self {
            num_devices: 5,
            rounds: 100,
            local_epochs: 1,
            learning_rate: 1.0,
            temperature: crate::distill::DEFAULT_TEMPERATURE,
            lambda: LambdaSetting::Named(NamedLambda::Adaptive),
            aggregation: AggregationSetting::Uniform,
            batch_size: 0,
            threads: 1,
            record_wall_time: false,
            frank_wolfe_max_iters: fw.max_iters,
            frank_wolfe_tol: fw.tol,
            frank_wolfe_normalize: fw.normalize,
            serial_tolerance_pp: serial.tolerance_pp,
            serial_patience: serial.patience,
            serial_max_source_rounds: serial.max_source_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub iid_beta: f64,
    pub non_iid_beta: f64,
    /// Fixed λ values compared against adaptive by `sweep-lambda`.
    pub lambda_sweep: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::Fssda,
                Method::FssdaSerial,
                Method::Floly,
                Method::Ssdaonly,
            ],
            seeds: vec![1, 2, 3, 4, 5],
            modes: vec![Mode::Iid, Mode::NonIid],
            iid_beta: 1e6,
            non_iid_beta: 0.1,
            lambda_sweep: vec![0.1, 0.5, 0.9],
            output_dir: PathBuf::from("fssda-output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultisourceSection {
    pub sources: Vec<ShiftConfig>,
    pub target: ShiftConfig,
}

impl Default for MultisourceSection {
    fn default() -> Self {
        Self {
            sources: vec![
                ShiftConfig::new("left", PI / 4.0, 1.0, 0.3),
                ShiftConfig::new("right", -PI / 4.0, 1.0, 0.3),
            ],
            target: ShiftConfig::new("center", 0.0, 1.0, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    pub federation: FederationSection,
    pub experiment: ExperimentSection,
    /// Target shifts; each pairs an unshifted source with one target.
    pub pairs: Vec<ShiftConfig>,
    pub multisource: MultisourceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkConfig::default(),
            federation: FederationSection::default(),
            experiment: ExperimentSection::default(),
            pairs: vec![
                ShiftConfig::new("small-gap", PI / 12.0, 1.2, 0.3),
                ShiftConfig::new("large-gap", PI / 3.0, 1.5, 0.3),
            ],
            multisource: MultisourceSection::default(),
        }
    }
}

/// Annotated default configuration, as printed by `print-default-config`.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("default_config.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::config("config", e.to_string());
        // Deserializing the text directly keeps line numbers in error messages.
        let parsed: ExperimentConfig = toml::from_str(text).map_err(bad)?;
        if overrides.is_empty() {
            parsed.validate()?;
            return Ok(parsed);
        }
        // Overrides may address keys the file leaves at their defaults.
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::config("config", e.to_string()))?;
        merge(&mut table, text.parse().map_err(bad)?);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = table.try_into().map_err(bad)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Output directory after applying [`OUTPUT_DIR_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.experiment.output_dir.clone(),
        }
    }

    pub fn beta(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Iid => self.experiment.iid_beta,
            Mode::NonIid => self.experiment.non_iid_beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark;
        let err = |field: &str, msg: String| Err(Error::config(field, msg));
        if b.num_classes < 2 {
            return err("benchmark.num_classes", "must be at least 2".into());
        }
        if b.feature_dim < 2 {
            return err("benchmark.feature_dim", "must be at least 2".into());
        }
        if !(b.class_separation > 0.0) {
            return err("benchmark.class_separation", "must be positive".into());
        }
        if !(b.class_std >= 0.0) {
            return err("benchmark.class_std", "must be non-negative".into());
        }
        if !(b.test_fraction > 0.0 && b.test_fraction < 1.0) {
            return err("benchmark.test_fraction", "must lie in (0, 1)".into());
        }
        if b.source_samples < 2 * b.num_classes || b.target_samples < 2 * b.num_classes {
            return err(
                "benchmark.source_samples",
                "each pool needs at least two samples per class".into(),
            );
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if let Err(e) = p.shift().validate(b.feature_dim) {
                return err(&format!("pairs.{i}"), e.to_string());
            }
        }
        let ms = &self.multisource;
        for (i, s) in ms.sources.iter().enumerate() {
            if let Err(e) = s.shift().validate(b.feature_dim) {
                return err(&format!("multisource.sources.{i}"), e.to_string());
            }
        }
        if let Err(e) = ms.target.shift().validate(b.feature_dim) {
            return err("multisource.target", e.to_string());
        }

        let e = &self.experiment;
        if e.methods.is_empty() {
            return err(
                "experiment.methods",
                "at least one method is required".into(),
            );
        }
        if e.seeds.is_empty() {
            return err("experiment.seeds", "at least one seed is required".into());
        }
        if e.modes.is_empty() {
            return err("experiment.modes", "at least one mode is required".into());
        }
        if self.pairs.is_empty() {
            return err("pairs", "at least one domain pair is required".into());
        }
        if e.methods.contains(&Method::FssdaMultisource) && ms.sources.len() < 2 {
            return err(
                "multisource.sources",
                "fssda-multisource needs at least two source domains".into(),
            );
        }
        if ms.sources.is_empty() {
            return err(
                "multisource.sources",
                "at least one source domain is required".into(),
            );
        }
        for (field, beta) in [
            ("experiment.iid_beta", e.iid_beta),
            ("experiment.non_iid_beta", e.non_iid_beta),
        ] {
            if !(beta > 0.0) || !beta.is_finite() {
                return err(field, "must be positive".into());
            }
        }
        if let Some(l) = e.lambda_sweep.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return err("experiment.lambda_sweep", format!("{l} is outside [0, 1]"));
        }
        self.federation_config(1, self.federation.lambda.mode(), Schedule::Parallel, 0)
            .validate()
            .map_err(|e| match e {
                Error::Config { field, message } => {
                    Error::config(format!("federation.{field}"), message)
                }
                other => other,
            })
    }

    pub fn federation_config(
        &self,
        num_sources: usize,
        lambda_mode: LambdaMode,
        schedule: Schedule,
        seed: u64,
    ) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            num_devices: f.num_devices,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            learning_rate: f.learning_rate,
            temperature: f.temperature,
            lambda_mode,
            schedule,
            aggregation: match f.aggregation {
                AggregationSetting::Uniform => Aggregation::Uniform,
                AggregationSetting::SampleWeighted => Aggregation::SampleWeighted,
            },
            num_sources,
            seed,
            batch_size: (f.batch_size > 0).then_some(f.batch_size),
            threads: f.threads,
            serial: SerialOptions {
                tolerance_pp: f.serial_tolerance_pp,
                patience: f.serial_patience,
                max_source_rounds: f.serial_max_source_rounds,
            },
            frank_wolfe: FrankWolfeOptions {
                max_iters: f.frank_wolfe_max_iters,
                tol: f.frank_wolfe_tol,
                normalize: f.frank_wolfe_normalize,
            },
            record_wall_time: f.record_wall_time,
        }
    }
}

/// Recursively overlays `top` onto `base`; arrays and scalars replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. Numeric path segments index into arrays. The value
/// is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like section.key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut root = toml::Value::Table(std::mem::take(table));
    let result = set_path(&mut root, &keys, value, path);
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    result
}

fn set_path(cursor: &mut toml::Value, keys: &[&str], value: toml::Value, path: &str) -> Result<()> {
    let (key, rest) = keys.split_first().expect("non-empty path");
    let slot = match cursor {
        toml::Value::Table(t) if rest.is_empty() => {
            t.insert((*key).to_string(), value);
            return Ok(());
        }
        toml::Value::Table(t) => t
            .entry((*key).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        toml::Value::Array(a) => {
            let i: usize = key
                .parse()
                .map_err(|_| Error::config(path, format!("`{key}` is not an array index")))?;
            a.get_mut(i)
                .ok_or_else(|| Error::config(path, format!("index {i} out of range")))?
        }
        _ => {
            return Err(Error::config(
                path,
                format!("cannot set `{key}` inside a scalar"),
            ))
        }
    };
    if rest.is_empty() {
        *slot = value;
        Ok(())
    } else {
        set_path(slot, rest, value, path)
    }
}
