//! Wires data generation, partitioning and federation runs, and writes
//! per-round curves plus the summary table.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method, Mode, ShiftConfig};
use super::summary::SummaryTable;
use crate::data::{self, DomainDataset, DomainRequest, MaskedTarget, PartitionPlan};
use crate::error::{Error, Result};
use crate::federation::{
    self, DeviceState, Federation, LabeledSet, LambdaMode, RunOutput, Schedule,
};
use crate::model::ModelSpec;

/// Column order of every per-round curve file.
pub const CURVE_HEADER: [&str; 12] = [
    "run_id",
    "method",
    "seed",
    "round",
    "source_acc",
    "target_acc",
    "target_loss",
    "mean_lambda",
    "min_lambda",
    "max_lambda",
    "wall_ms",
    "partition_hash",
];

/// One source domain after splitting and partitioning.
#[derive(Debug, Clone)]
pub struct SourceDomain {
    pub name: String,
    pub train: DomainDataset,
    pub test: DomainDataset,
    pub partition: PartitionPlan,
}

/// Everything a run consumes, fixed by (config, domains, mode, seed).
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub spec: ModelSpec,
    pub sources: Vec<SourceDomain>,
    pub target_name: String,
    pub target: MaskedTarget,
    pub target_partition: PartitionPlan,
    pub target_test: DomainDataset,
    /// Federation seed shared by every method on this data.
    pub federation_seed: u64,
    pub partition_hash: String,
}

/// Derived seeds, drawn in a fixed order so every consumer is stable.
struct SeedPlan {
    data: u64,
    split: u64,
    mask: u64,
    target_partition: u64,
    federation: u64,
    source_partitions: Vec<u64>,
}

impl SeedPlan {
    fn new(seed: u64, num_sources: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            data: rng.next_u64(),
            split: rng.next_u64(),
            mask: rng.next_u64(),
            target_partition: rng.next_u64(),
            federation: rng.next_u64(),
            source_partitions: (0..num_sources).map(|_| rng.next_u64()).collect(),
        }
    }
}

/// The generated pools before any split, for `gen-data`.
pub fn generate_pools(
    config: &ExperimentConfig,
    sources: &[ShiftConfig],
    target: &ShiftConfig,
    seed: u64,
) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    let b = &config.benchmark;
    let seeds = SeedPlan::new(seed, sources.len());
    let request = |s: &ShiftConfig, n: usize| DomainRequest {
        name: s.name.clone(),
        shift: s.shift(),
        samples: n,
    };
    let reqs: Vec<DomainRequest> = sources
        .iter()
        .map(|s| request(s, b.source_samples))
        .collect();
    let family = data::make_domain_family(
        seeds.data,
        &b.mixture(),
        &reqs,
        &request(target, b.target_samples),
    )?;
    Ok((family.sources, family.target))
}

pub fn prepare_data(
    config: &ExperimentConfig,
    sources: &[ShiftConfig],
    target: &ShiftConfig,
    mode: Mode,
    seed: u64,
) -> Result<PreparedData> {
    let b = &config.benchmark;
    let k = config.federation.num_devices;
    let beta = config.beta(mode);
    let seeds = SeedPlan::new(seed, sources.len());
    let (source_pools, target_pool) = generate_pools(config, sources, target, seed)?;

    let mut prepared_sources = Vec::with_capacity(sources.len());
    for (j, pool) in source_pools.into_iter().enumerate() {
        let (train, test) = data::split_test(
            &pool,
            b.test_fraction,
            seeds.split.wrapping_add(j as u64 + 1),
        )?;
        let partition = data::dirichlet_partition(
            train.labels(),
            b.num_classes,
            k,
            beta,
            seeds.source_partitions[j],
        )?;
        prepared_sources.push(SourceDomain {
            name: pool.domain_id().to_string(),
            train,
            test,
            partition,
        });
    }
    let (target_train, target_test) = data::split_test(&target_pool, b.test_fraction, seeds.split)?;
    let masked = data::mask_labels(&target_train, b.labeled_per_class, seeds.mask)?;
    let target_partition = data::dirichlet_partition(
        target_train.labels(),
        b.num_classes,
        k,
        beta,
        seeds.target_partition,
    )?;

    let partition_hash = partition_hash(
        prepared_sources.iter().map(|s| &s.partition),
        &target_partition,
        &masked.view().labeled_mask,
    );
    Ok(PreparedData {
        spec: ModelSpec::new(b.feature_dim, b.hidden_dim, b.num_classes)?,
        sources: prepared_sources,
        target_name: target.name.clone(),
        target: masked,
        target_partition,
        target_test,
        federation_seed: seeds.federation,
        partition_hash,
    })
}

/// Short SHA-256 digest of every device assignment and the label mask.
pub fn partition_hash<'a>(
    sources: impl Iterator<Item = &'a PartitionPlan>,
    target: &PartitionPlan,
    labeled_mask: &[bool],
) -> String {
    let mut h = Sha256::new();
    let mut feed = |tag: &[u8], plan: &PartitionPlan| {
        h.update(tag);
        for device in &plan.assignments {
            h.update((device.len() as u64).to_le_bytes());
            for &i in device {
                h.update((i as u64).to_le_bytes());
            }
        }
    };
    for plan in sources {
        feed(b"source", plan);
    }
    feed(b"target", target);
    h.update(b"mask");
    h.update(labeled_mask.iter().map(|&m| m as u8).collect::<Vec<u8>>());
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Builds devices holding the chosen sources (by index into `data.sources`).
pub fn build_federation(data: &PreparedData, source_indices: &[usize]) -> Result<Federation> {
    let k = data.target_partition.num_devices();
    let mut devices = Vec::with_capacity(k);
    for device in 0..k {
        let shards = source_indices
            .iter()
            .map(|&j| {
                let s = &data.sources[j];
                LabeledSet::from_dataset(&s.train.subset(&s.partition.assignments[device]))
            })
            .collect::<Result<Vec<_>>>()?;
        let target = data
            .target
            .shard(&data.target_partition.assignments[device]);
        devices.push(DeviceState::new(device, shards, target));
    }
    let source_tests = source_indices
        .iter()
        .map(|&j| LabeledSet::from_dataset(&data.sources[j].test))
        .collect::<Result<Vec<_>>>()?;
    Federation::new(
        data.spec,
        devices,
        source_tests,
        LabeledSet::from_dataset(&data.target_test)?,
    )
}

/// How a single run trains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunKind {
    Parallel(LambdaMode),
    Serial(LambdaMode),
    Floly,
    Ssdaonly(LambdaMode),
}

pub fn execute(
    config: &ExperimentConfig,
    data: &PreparedData,
    source_indices: &[usize],
    kind: RunKind,
) -> Result<RunOutput> {
    let mut fed = build_federation(data, source_indices)?;
    let (lambda, schedule) = match kind {
        RunKind::Parallel(l) | RunKind::Ssdaonly(l) => (l, Schedule::Parallel),
        RunKind::Serial(l) => (l, Schedule::Serial),
        RunKind::Floly => (LambdaMode::Fixed(1.0), Schedule::Parallel),
    };
    let fc = config.federation_config(source_indices.len(), lambda, schedule, data.federation_seed);
    match kind {
        RunKind::Parallel(_) => federation::run_fssda(&fc, &mut fed),
        RunKind::Serial(_) => federation::run_serial(&fc, &mut fed),
        RunKind::Floly => federation::run_floly(&fc, &mut fed),
        RunKind::Ssdaonly(_) => federation::run_ssdaonly(&fc, &mut fed),
    }
}

/// One finished run and the labels it is reported under.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub method: String,
    pub pair: String,
    pub mode: Mode,
    pub seed: u64,
    pub partition_hash: String,
    pub source_names: Vec<String>,
    pub output: RunOutput,
}

impl RunRecord {
    pub fn target_curve(&self) -> Vec<f64> {
        self.output.metrics.iter().map(|m| m.target_acc).collect()
    }

    /// Target accuracy after the last round (the initial model's if none ran).
    pub fn final_target_acc(&self) -> f64 {
        self.output
            .metrics
            .last()
            .map_or(f64::NAN, |m| m.target_acc)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub summary: SummaryTable,
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn run(&self, method: &str, pair: &str, mode: Mode, seed: u64) -> Option<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.method == method && r.pair == pair && r.mode == mode && r.seed == seed)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_curve(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for m in &record.output.metrics {
        let stats = m.lambda_stats();
        w.write_record([
            record.run_id.clone(),
            record.method.clone(),
            record.seed.to_string(),
            m.round.to_string(),
            opt(m.source_acc),
            m.target_acc.to_string(),
            m.target_loss.to_string(),
            opt(stats.map(|s| s.0)),
            opt(stats.map(|s| s.1)),
            opt(stats.map(|s| s.2)),
            m.wall_ms.to_string(),
            record.partition_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per round and device, the imitation weights of the last local epoch.
pub fn write_weights(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "run_id".to_string(),
        "round".into(),
        "device".into(),
        "hard".into(),
    ];
    header.extend(record.source_names.iter().cloned());
    header.push("sum".into());
    w.write_record(&header)?;
    for m in &record.output.metrics {
        for (device, epochs) in m.device_weights.iter().enumerate() {
            let Some(last) = epochs.last() else { continue };
            let mut row = vec![
                record.run_id.clone(),
                m.round.to_string(),
                device.to_string(),
            ];
            row.extend(last.iter().map(|v| v.to_string()));
            row.push(last.iter().sum::<f64>().to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Collects runs and writes their files as they finish.
struct Sink<'a> {
    out: Option<&'a Path>,
    report: Report,
}

impl<'a> Sink<'a> {
    fn new(out: Option<&'a Path>) -> Result<Self> {
        if let Some(dir) = out {
            let curves = dir.join("curves");
            fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        }
        Ok(Self {
            out,
            report: Report::default(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        method: &str,
        pair: &str,
        mode: Mode,
        seed: u64,
        data: &PreparedData,
        source_indices: &[usize],
        output: RunOutput,
        with_weights: bool,
    ) -> Result<()> {
        let record = RunRecord {
            run_id: format!("{method}_{pair}_{}_s{seed}", mode.name()),
            method: method.into(),
            pair: pair.into(),
            mode,
            seed,
            partition_hash: data.partition_hash.clone(),
            source_names: source_indices
                .iter()
                .map(|&j| data.sources[j].name.clone())
                .collect(),
            output,
        };
        log::info!(
            "{}: final target accuracy {:.4}",
            record.run_id,
            record.final_target_acc()
        );
        if let Some(dir) = self.out {
            let path = dir.join("curves").join(format!("{}.csv", record.run_id));
            write_curve(&path, &record)?;
            self.report.files.push(path);
            if with_weights {
                let path = dir
                    .join("curves")
                    .join(format!("{}_weights.csv", record.run_id));
                write_weights(&path, &record)?;
                self.report.files.push(path);
            }
        }
        self.report
            .summary
            .push(method, pair, mode.name(), record.final_target_acc());
        self.report.runs.push(record);
        Ok(())
    }

    fn finish(mut self) -> Result<Report> {
        if let Some(dir) = self.out {
            let csv_path = dir.join("summary.csv");
            self.report.summary.write_csv(&csv_path)?;
            let txt_path = dir.join("summary.txt");
            fs::write(&txt_path, self.report.summary.to_text())
                .map_err(|e| Error::io(&txt_path, e))?;
            self.report.files.push(csv_path);
            self.report.files.push(txt_path);
        }
        Ok(self.report)
    }
}

fn identity_source() -> ShiftConfig {
    ShiftConfig {
        name: "source".into(),
        rotation: 0.0,
        scale: 1.0,
        noise: 0.0,
        translation: Vec::new(),
    }
}

/// Every configured method on every (pair, mode, seed).
///
/// `fssda-multisource` trains against the `[multisource]` sources with each
/// pair's shift as the target.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Report> {
    config.validate()?;
    let mut sink = Sink::new(out)?;
    let lambda = config.federation.lambda.mode();
    let single = [identity_source()];
    for pair in &config.pairs {
        for &mode in &config.experiment.modes {
            for &seed in &config.experiment.seeds {
                let data = prepare_data(config, &single, pair, mode, seed)?;
                for &method in &config.experiment.methods {
                    let kind = match method {
                        Method::Fssda | Method::FssdaMultisource => RunKind::Parallel(lambda),
                        Method::FssdaSerial => RunKind::Serial(lambda),
                        Method::Floly => RunKind::Floly,
                        Method::Ssdaonly => RunKind::Ssdaonly(lambda),
                    };
                    if method == Method::FssdaMultisource {
                        let ms =
                            prepare_data(config, &config.multisource.sources, pair, mode, seed)?;
                        let all: Vec<usize> = (0..ms.sources.len()).collect();
                        let output = execute(config, &ms, &all, kind)?;
                        sink.record(
                            method.name(),
                            &pair.name,
                            mode,
                            seed,
                            &ms,
                            &all,
                            output,
                            true,
                        )?;
                    } else {
                        let output = execute(config, &data, &[0], kind)?;
                        sink.record(
                            method.name(),
                            &pair.name,
                            mode,
                            seed,
                            &data,
                            &[0],
                            output,
                            false,
                        )?;
                    }
                }
            }
        }
    }
    sink.finish()
}

pub fn sweep_label(lambda: Option<f64>) -> String {
    match lambda {
        Some(l) => format!("fssda-lambda-{l}"),
        None => "fssda-adaptive".into(),
    }
}

/// Fixed-λ runs from `experiment.lambda_sweep` plus one adaptive run, all on
/// the same data and partitions.
pub fn run_lambda_sweep(config: &ExperimentConfig, out: Option<&Path>) -> Result<Report> {
    config.validate()?;
    let mut sink = Sink::new(out)?;
    let single = [identity_source()];
    for pair in &config.pairs {
        for &mode in &config.experiment.modes {
            for &seed in &config.experiment.seeds {
                let data = prepare_data(config, &single, pair, mode, seed)?;
                let settings = config
                    .experiment
                    .lambda_sweep
                    .iter()
                    .map(|&l| Some(l))
                    .chain(std::iter::once(None));
                for setting in settings {
                    let mode_l = setting.map_or(LambdaMode::Adaptive, LambdaMode::Fixed);
                    let output = execute(config, &data, &[0], RunKind::Parallel(mode_l))?;
                    sink.record(
                        &sweep_label(setting),
                        &pair.name,
                        mode,
                        seed,
                        &data,
                        &[0],
                        output,
                        false,
                    )?;
                }
            }
        }
    }
    sink.finish()
}

pub fn single_source_label(name: &str) -> String {
    format!("fssda-single-{name}")
}

/// Multi-source FSSDA against every `[multisource]` source at once, plus
/// single-source FSSDA from each source alone on identical data.
pub fn run_multisource(config: &ExperimentConfig, out: Option<&Path>) -> Result<Report> {
    config.validate()?;
    let mut sink = Sink::new(out)?;
    let ms = &config.multisource;
    let lambda = config.federation.lambda.mode();
    for &mode in &config.experiment.modes {
        for &seed in &config.experiment.seeds {
            let data = prepare_data(config, &ms.sources, &ms.target, mode, seed)?;
            let all: Vec<usize> = (0..data.sources.len()).collect();
            let output = execute(config, &data, &all, RunKind::Parallel(lambda))?;
            sink.record(
                Method::FssdaMultisource.name(),
                &ms.target.name,
                mode,
                seed,
                &data,
                &all,
                output,
                true,
            )?;
            for j in 0..data.sources.len() {
                let output = execute(config, &data, &[j], RunKind::Parallel(lambda))?;
                let label = single_source_label(&data.sources[j].name);
                sink.record(
                    &label,
                    &ms.target.name,
                    mode,
                    seed,
                    &data,
                    &[j],
                    output,
                    false,
                )?;
            }
        }
    }
    sink.finish()
}

/// Dumps every pair's unsplit pools (and the multi-source family) to CSV.
pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let dir = out.join("data");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for &seed in &config.experiment.seeds {
        for pair in &config.pairs {
            let (sources, target) = generate_pools(config, &[identity_source()], pair, seed)?;
            let path = dir.join(format!("{}_s{seed}.csv", pair.name));
            let all: Vec<&DomainDataset> = sources.iter().chain(std::iter::once(&target)).collect();
            data::write_datasets_csv(&path, &all)?;
            files.push(path);
        }
        let ms = &config.multisource;
        let (sources, target) = generate_pools(config, &ms.sources, &ms.target, seed)?;
        let path = dir.join(format!("multisource_{}_s{seed}.csv", ms.target.name));
        let all: Vec<&DomainDataset> = sources.iter().chain(std::iter::once(&target)).collect();
        data::write_datasets_csv(&path, &all)?;
        files.push(path);
    }
    Ok(files)
}
