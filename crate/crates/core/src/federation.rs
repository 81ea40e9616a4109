//! Simulated devices and the server loop.
//!
//! Devices never hand data to the server: every update function takes a
//! device's shards by reference and returns parameter vectors only. One
//! round runs all source updates, aggregates them, then runs all target
//! updates against the freshly aggregated source models.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{one_hot, DomainDataset, TargetShard, TargetView};
use crate::distill::{self, DistillTerms, FrankWolfeOptions, ImitationWeights};
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Adaptive,
    /// Hard-label weight; the remainder is split evenly across sources.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Parallel,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Uniform,
    SampleWeighted,
}

/// Stopping rule for the source-only phase of the serial schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SerialOptions {
    /// Source accuracy change, in percentage points, counted as "no change".
    pub tolerance_pp: f64,
    /// Consecutive quiet rounds needed to declare convergence.
    pub patience: usize,
    pub max_source_rounds: usize,
}

impl Default for SerialOptions {
    fn default() -> Self {
        Self {
            tolerance_pp: 0.1,
            patience: 5,
            max_source_rounds: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub num_devices: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub lambda_mode: LambdaMode,
    pub schedule: Schedule,
    pub aggregation: Aggregation,
    pub num_sources: usize,
    pub seed: u64,
    /// `None` trains on the whole shard each epoch.
    pub batch_size: Option<usize>,
    /// Worker threads for device updates; 0 lets rayon decide.
    pub threads: usize,
    pub serial: SerialOptions,
    pub frank_wolfe: FrankWolfeOptions,
    /// Off by default so repeated runs produce identical metrics.
    pub record_wall_time: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_devices: 5,
            rounds: 100,
            local_epochs: 1,
            learning_rate: 0.001,
            temperature: distill::DEFAULT_TEMPERATURE,
            lambda_mode: LambdaMode::Adaptive,
            schedule: Schedule::Parallel,
            aggregation: Aggregation::Uniform,
            num_sources: 1,
            seed: 0,
            batch_size: None,
            threads: 1,
            serial: SerialOptions::default(),
            frank_wolfe: FrankWolfeOptions::default(),
            record_wall_time: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.num_devices == 0 {
            return bad("num_devices", "must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", "must be positive");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature", "must be positive");
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !(0.0..=1.0).contains(&l) {
                return bad("lambda", "fixed lambda must lie in [0, 1]");
            }
        }
        if self.num_sources == 0 {
            return bad("num_sources", "must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size", "must be positive when set");
        }
        if self.serial.patience == 0 {
            return bad("serial.patience", "must be at least 1");
        }
        Ok(())
    }
}

/// Fully labeled rows with their one-hot targets prebuilt.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    batch: Batch,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let targets = one_hot(&labels, num_classes);
        Ok(Self {
            batch: Batch::new(features, targets)?,
            labels,
        })
    }

    pub fn from_dataset(dataset: &DomainDataset) -> Result<Self> {
        Self::new(
            dataset.features().clone(),
            dataset.labels().to_vec(),
            dataset.num_classes(),
        )
    }

    pub fn features(&self) -> &Array2<f64> {
        self.batch.features()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One simulated device: its private shards, local models and RNG stream.
#[derive(Debug)]
pub struct DeviceState {
    device_id: usize,
    source_shards: Vec<LabeledSet>,
    target_shard: TargetShard,
    local_source_params: Vec<ParamVector>,
    local_target_params: Option<ParamVector>,
    rng: ChaCha8Rng,
    target_accesses: AtomicUsize,
}

impl DeviceState {
    /// `source_shards` holds one shard per source domain.
    pub fn new(
        device_id: usize,
        source_shards: Vec<LabeledSet>,
        target_shard: TargetShard,
    ) -> Self {
        Self {
            device_id,
            source_shards,
            target_shard,
            local_source_params: Vec::new(),
            local_target_params: None,
            rng: device_rng(0, device_id),
            target_accesses: AtomicUsize::new(0),
        }
    }

    pub fn device_id(&self) -> usize {
        self.device_id
    }

    pub fn source_shards(&self) -> &[LabeledSet] {
        &self.source_shards
    }

    /// Training-side view of the target shard. Every call is counted.
    pub fn target_view(&self) -> &TargetView {
        self.target_accesses.fetch_add(1, Ordering::SeqCst);
        self.target_shard.view()
    }

    pub fn target_access_count(&self) -> usize {
        self.target_accesses.load(Ordering::SeqCst)
    }

    /// Read counter of the held-out labels behind this device's target shard.
    pub fn held_out_label_reads(&self) -> usize {
        self.target_shard.true_labels().read_count()
    }

    pub fn local_source_params(&self) -> &[ParamVector] {
        &self.local_source_params
    }

    pub fn local_target_params(&self) -> Option<&ParamVector> {
        self.local_target_params.as_ref()
    }

    fn reset(&mut self, seed: u64, sources: &[ParamVector], target: &ParamVector) {
        self.rng = device_rng(seed, self.device_id);
        self.local_source_params = sources.to_vec();
        self.local_target_params = Some(target.clone());
    }
}

/// Stream 0 belongs to the server; device `k` uses stream `k + 1`.
fn device_rng(seed: u64, device_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(device_id as u64 + 1);
    rng
}

/// Initial global models: every source model in order, then the target model.
pub fn init_globals(
    spec: ModelSpec,
    num_sources: usize,
    seed: u64,
) -> (Vec<ParamVector>, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = (0..num_sources)
        .map(|_| ParamVector::init_uniform(spec, &mut rng))
        .collect();
    let target = ParamVector::init_uniform(spec, &mut rng);
    (sources, target)
}

/// Devices plus the server's held-out evaluation sets.
#[derive(Debug)]
pub struct Federation {
    spec: ModelSpec,
    devices: Vec<DeviceState>,
    source_tests: Vec<LabeledSet>,
    target_test: LabeledSet,
}

impl Federation {
    pub fn new(
        spec: ModelSpec,
        devices: Vec<DeviceState>,
        source_tests: Vec<LabeledSet>,
        target_test: LabeledSet,
    ) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::param("a federation needs at least one device"));
        }
        if source_tests.is_empty() {
            return Err(Error::param(
                "a federation needs at least one source domain",
            ));
        }
        for d in &devices {
            if d.source_shards.len() != source_tests.len() {
                return Err(Error::shape(format!(
                    "device {} holds {} source shards, expected {}",
                    d.device_id,
                    d.source_shards.len(),
                    source_tests.len()
                )));
            }
        }
        let width_ok = |f: &Array2<f64>| f.nrows() == 0 || f.ncols() == spec.input_dim;
        let all_widths_ok = devices.iter().all(|d| {
            d.source_shards.iter().all(|s| width_ok(s.features()))
                && width_ok(&d.target_shard.view().features)
        }) && source_tests.iter().all(|s| width_ok(s.features()))
            && width_ok(target_test.features());
        if !all_widths_ok {
            return Err(Error::shape("feature width disagrees with the model spec"));
        }
        Ok(Self {
            spec,
            devices,
            source_tests,
            target_test,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn num_sources(&self) -> usize {
        self.source_tests.len()
    }

    fn check(&self, config: &FederationConfig) -> Result<()> {
        config.validate()?;
        if config.num_devices != self.devices.len() {
            return Err(Error::config(
                "num_devices",
                format!(
                    "config says {}, federation has {}",
                    config.num_devices,
                    self.devices.len()
                ),
            ));
        }
        if config.num_sources != self.num_sources() {
            return Err(Error::config(
                "num_sources",
                format!(
                    "config says {}, federation has {}",
                    config.num_sources,
                    self.num_sources()
                ),
            ));
        }
        Ok(())
    }
}

/// Metrics after one round. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based, contiguous across serial phases.
    pub round: usize,
    /// Mean over source domains; `None` when no source model is trained.
    pub source_acc: Option<f64>,
    pub target_acc: f64,
    /// Hard-label cross-entropy of the target model on the target test set.
    pub target_loss: f64,
    /// Per device, per local epoch: the imitation weights used. Empty for
    /// devices that skipped the target update or rounds without one.
    pub device_weights: Vec<Vec<Vec<f64>>>,
    pub wall_ms: f64,
}

impl RoundMetrics {
    /// Every hard-label weight chosen this round.
    pub fn hard_lambdas(&self) -> impl Iterator<Item = f64> + '_ {
        self.device_weights.iter().flatten().map(|w| w[0])
    }

    /// `(mean, min, max)` of the hard-label weights, if any were chosen.
    pub fn lambda_stats(&self) -> Option<(f64, f64, f64)> {
        let (mut n, mut sum, mut lo, mut hi) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for l in self.hard_lambdas() {
            n += 1;
            sum += l;
            lo = lo.min(l);
            hi = hi.max(l);
        }
        (n > 0).then(|| (sum / n as f64, lo, hi))
    }

    /// Per-device mean of the last epoch's weights.
    pub fn mean_final_weights(&self) -> Option<Vec<f64>> {
        let finals: Vec<&Vec<f64>> = self
            .device_weights
            .iter()
            .filter_map(|e| e.last())
            .collect();
        let first = finals.first()?;
        let mut mean = vec![0.0; first.len()];
        for w in &finals {
            for (m, v) in mean.iter_mut().zip(w.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= finals.len() as f64);
        Some(mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    /// Final global models. Runs without aggregation return the initial ones.
    pub global_sources: Vec<ParamVector>,
    pub global_target: ParamVector,
    /// Rounds in which the source models were aggregated.
    pub source_aggregations: usize,
    /// Rounds in which the target model was aggregated.
    pub target_aggregations: usize,
    /// Rounds spent before target training started (serial schedule only).
    pub source_phase_rounds: usize,
}

/// Shuffled minibatches for one epoch, or `None` for a single full-batch step.
fn epoch_batches(
    n: usize,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Vec<usize>>> {
    match batch_size {
        Some(b) if b < n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(b).map(|c| Some(c.to_vec())).collect()
        }
        _ => vec![None],
    }
}

fn sub_batch(batch: &Batch, idx: &[usize]) -> Result<Batch> {
    Batch::new(
        batch.features().select(Axis(0), idx),
        batch.targets().select(Axis(0), idx),
    )
}

fn supervised_epochs(
    start: &ParamVector,
    batch: &Batch,
    config: &FederationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    let mut params = start.clone();
    for _ in 0..config.local_epochs {
        for chunk in epoch_batches(batch.len(), config.batch_size, rng) {
            let g = match chunk {
                None => model::grad(&params, batch, 1.0)?,
                Some(idx) => model::grad(&params, &sub_batch(batch, &idx)?, 1.0)?,
            };
            params = model::sgd_step(&params, &g, config.learning_rate)?;
        }
    }
    Ok(params)
}

/// Local source training of every source model, starting from `globals`.
///
/// Returns one entry per source domain; `None` where the device's shard for
/// that domain is empty and the device sits the round out.
pub fn device_source_update(
    globals: &[ParamVector],
    device: &mut DeviceState,
    config: &FederationConfig,
) -> Result<Vec<Option<ParamVector>>> {
    if globals.len() != device.source_shards.len() {
        return Err(Error::shape("one global model per source shard expected"));
    }
    if device.local_source_params.len() != globals.len() {
        device.local_source_params = globals.to_vec();
    }
    let mut out = Vec::with_capacity(globals.len());
    for (j, global) in globals.iter().enumerate() {
        let shard = &device.source_shards[j];
        if shard.is_empty() {
            log::warn!(
                "device {} has no samples for source {j}; skipping",
                device.device_id
            );
            out.push(None);
            continue;
        }
        let params = supervised_epochs(global, &shard.batch, config, &mut device.rng)?;
        device.local_source_params[j] = params.clone();
        out.push(Some(params));
    }
    Ok(out)
}

/// Result of one device's target update.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetUpdate {
    pub params: ParamVector,
    /// Imitation weights for each local epoch.
    pub weights: Vec<Vec<f64>>,
}

fn fixed_weights(lambda: f64, num_sources: usize) -> Result<ImitationWeights> {
    if num_sources == 1 {
        return ImitationWeights::single(lambda);
    }
    let mut w = vec![lambda];
    w.extend(std::iter::repeat_n(
        (1.0 - lambda) / num_sources as f64,
        num_sources,
    ));
    ImitationWeights::from_vec(w)
}

/// Local distillation of the target model against `source_models`.
///
/// Soft labels are computed once; imitation weights are chosen each epoch from
/// full-shard gradients. Returns `None` for an empty target shard.
pub fn device_target_update(
    global_target: &ParamVector,
    source_models: &[&ParamVector],
    device: &mut DeviceState,
    config: &FederationConfig,
) -> Result<Option<TargetUpdate>> {
    if source_models.is_empty() {
        return Err(Error::param("at least one source model is required"));
    }
    let view = device.target_shard.view();
    device.target_accesses.fetch_add(1, Ordering::SeqCst);
    if view.is_empty() {
        log::warn!(
            "device {} has an empty target shard; skipping",
            device.device_id
        );
        return Ok(None);
    }
    let softs = source_models
        .iter()
        .enumerate()
        .map(|(j, s)| {
            distill::gen_soft_labels(s, &view.features, config.temperature, format!("source{j}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let terms = DistillTerms::new(&view.features, &view.hard_labels, &softs)?;
    let labeled = view.num_labeled();

    let mut params = global_target.clone();
    let mut log = Vec::with_capacity(config.local_epochs);
    for _ in 0..config.local_epochs {
        let (gh, gs) = terms.gradients(&params)?;
        let weights = match config.lambda_mode {
            LambdaMode::Adaptive => distill::adaptive_weights(&gh, &gs, &config.frank_wolfe)?,
            LambdaMode::Fixed(l) => fixed_weights(l, source_models.len())?,
        };
        if weights.hard() == 0.0 && labeled > 0 && source_models.len() > 1 {
            log::debug!("device {}: hard-label weight driven to 0", device.device_id);
        }
        for chunk in epoch_batches(view.len(), config.batch_size, &mut device.rng) {
            let g = match chunk {
                None => distill::combined_gradient(&gh, &gs, &weights)?,
                Some(idx) => {
                    let (bh, bs) = terms.subset(&idx)?.gradients(&params)?;
                    distill::combined_gradient(&bh, &bs, &weights)?
                }
            };
            params = model::sgd_step(&params, &g, config.learning_rate)?;
        }
        log.push(weights.lambdas().to_vec());
    }
    device.local_target_params = Some(params.clone());
    Ok(Some(TargetUpdate {
        params,
        weights: log,
    }))
}

/// Supervised target training on the labeled rows only.
pub fn device_labeled_update(
    global_target: &ParamVector,
    device: &mut DeviceState,
    config: &FederationConfig,
) -> Result<Option<ParamVector>> {
    let view = device.target_shard.view();
    device.target_accesses.fetch_add(1, Ordering::SeqCst);
    if view.num_labeled() == 0 {
        return Ok(None);
    }
    let (x, y) = view.labeled_rows();
    let batch = Batch::new(x, y)?;
    let params = supervised_epochs(global_target, &batch, config, &mut device.rng)?;
    device.local_target_params = Some(params.clone());
    Ok(Some(params))
}

fn aggregate(updates: &[(ParamVector, usize)], mode: Aggregation) -> Result<Option<ParamVector>> {
    if updates.is_empty() {
        return Ok(None);
    }
    let locals: Vec<ParamVector> = updates.iter().map(|(p, _)| p.clone()).collect();
    let weights: Vec<f64> = match mode {
        Aggregation::Uniform => vec![1.0; updates.len()],
        Aggregation::SampleWeighted => updates.iter().map(|&(_, n)| n as f64).collect(),
    };
    model::weighted_average_params(&locals, &weights).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceStep {
    Train,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetStep {
    Distill,
    LabeledOnly,
    Skip,
}

/// A device's updated parameters and its aggregation weight.
type Weighted = (ParamVector, usize);

#[derive(Debug, Clone, Copy)]
struct Plan {
    federated: bool,
    source: SourceStep,
    target: TargetStep,
}

struct Engine<'a> {
    config: &'a FederationConfig,
    pool: rayon::ThreadPool,
    global_sources: Vec<ParamVector>,
    global_target: ParamVector,
    source_aggregations: usize,
    target_aggregations: usize,
}

impl<'a> Engine<'a> {
    fn start(config: &'a FederationConfig, fed: &mut Federation) -> Result<Self> {
        fed.check(config)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        let (global_sources, global_target) =
            init_globals(fed.spec, config.num_sources, config.seed);
        for d in &mut fed.devices {
            d.reset(config.seed, &global_sources, &global_target);
        }
        Ok(Self {
            config,
            pool,
            global_sources,
            global_target,
            source_aggregations: 0,
            target_aggregations: 0,
        })
    }

    /// Runs up to `rounds` rounds, stopping early once `stop` holds.
    fn run(
        &mut self,
        fed: &mut Federation,
        plan: Plan,
        rounds: usize,
        first_round: usize,
        stop: &dyn Fn(&[RoundMetrics]) -> bool,
    ) -> Result<Vec<RoundMetrics>> {
        let mut metrics = Vec::with_capacity(rounds);
        for r in 0..rounds {
            let clock = self.config.record_wall_time.then(Instant::now);
            if plan.source == SourceStep::Train {
                self.source_round(fed, plan)?;
            }
            let device_weights = match plan.target {
                TargetStep::Skip => vec![Vec::new(); fed.devices.len()],
                _ => self.target_round(fed, plan)?,
            };
            let mut m = self.evaluate(fed, plan)?;
            m.round = first_round + r;
            m.device_weights = device_weights;
            m.wall_ms = clock.map_or(0.0, |c| c.elapsed().as_secs_f64() * 1e3);
            metrics.push(m);
            if stop(&metrics) {
                break;
            }
        }
        Ok(metrics)
    }

    fn source_round(&mut self, fed: &mut Federation, plan: Plan) -> Result<()> {
        let config = self.config;
        let globals = &self.global_sources;
        let updates: Vec<Vec<Option<ParamVector>>> = self.pool.install(|| {
            fed.devices
                .par_iter_mut()
                .map(|d| {
                    let start = if plan.federated {
                        globals.clone()
                    } else {
                        d.local_source_params.clone()
                    };
                    device_source_update(&start, d, config)
                })
                .collect::<Result<_>>()
        })?;
        if !plan.federated {
            return Ok(());
        }
        for j in 0..self.global_sources.len() {
            let collected: Vec<(ParamVector, usize)> = updates
                .iter()
                .zip(&fed.devices)
                .filter_map(|(u, d)| u[j].clone().map(|p| (p, d.source_shards[j].len())))
                .collect();
            if let Some(avg) = aggregate(&collected, config.aggregation)? {
                self.global_sources[j] = avg;
            }
        }
        self.source_aggregations += 1;
        Ok(())
    }

    fn target_round(&mut self, fed: &mut Federation, plan: Plan) -> Result<Vec<Vec<Vec<f64>>>> {
        let config = self.config;
        let global_sources = &self.global_sources;
        let global_target = &self.global_target;
        let results: Vec<(Option<Weighted>, Vec<Vec<f64>>)> = self.pool.install(|| {
            fed.devices
                .par_iter_mut()
                .map(|d| {
                    let start = if plan.federated {
                        global_target.clone()
                    } else {
                        d.local_target_params
                            .clone()
                            .expect("reset before training")
                    };
                    match plan.target {
                        TargetStep::Distill => {
                            let sources: Vec<ParamVector> = if plan.federated {
                                global_sources.clone()
                            } else {
                                d.local_source_params.clone()
                            };
                            let refs: Vec<&ParamVector> = sources.iter().collect();
                            let n = d.target_shard.view().len();
                            Ok(match device_target_update(&start, &refs, d, config)? {
                                Some(u) => (Some((u.params, n)), u.weights),
                                None => (None, Vec::new()),
                            })
                        }
                        TargetStep::LabeledOnly => {
                            let n = d.target_shard.view().num_labeled();
                            Ok((
                                device_labeled_update(&start, d, config)?.map(|p| (p, n)),
                                Vec::new(),
                            ))
                        }
                        TargetStep::Skip => Ok((None, Vec::new())),
                    }
                })
                .collect::<Result<_>>()
        })?;
        let weights = results.iter().map(|(_, w)| w.clone()).collect();
        if plan.federated {
            let collected: Vec<(ParamVector, usize)> =
                results.into_iter().filter_map(|(u, _)| u).collect();
            if let Some(avg) = aggregate(&collected, config.aggregation)? {
                self.global_target = avg;
            }
            self.target_aggregations += 1;
        }
        Ok(weights)
    }

    fn evaluate(&self, fed: &Federation, plan: Plan) -> Result<RoundMetrics> {
        let with_sources = plan.source == SourceStep::Train || plan.source == SourceStep::Frozen;
        let source_acc_of = |models: &[ParamVector]| -> Result<f64> {
            let mut total = 0.0;
            for (m, test) in models.iter().zip(&fed.source_tests) {
                total += model::accuracy(m, test.features(), test.labels())?;
            }
            Ok(total / models.len() as f64)
        };
        let target_of = |m: &ParamVector| -> Result<(f64, f64)> {
            let test = &fed.target_test;
            let acc = model::accuracy(m, test.features(), test.labels())?;
            let logits = model::forward_logits(m, test.features())?;
            let loss =
                model::cross_entropy(test.batch().targets(), &model::softmax_t(&logits, 1.0)?)?;
            Ok((acc, loss))
        };

        let (source_acc, target_acc, target_loss) = if plan.federated {
            let s = if with_sources {
                Some(source_acc_of(&self.global_sources)?)
            } else {
                None
            };
            let (a, l) = target_of(&self.global_target)?;
            (s, a, l)
        } else {
            // Per-device models, reported as the unweighted mean over devices.
            let k = fed.devices.len() as f64;
            let (mut s, mut a, mut l) = (0.0, 0.0, 0.0);
            for d in &fed.devices {
                s += source_acc_of(&d.local_source_params)?;
                let (da, dl) = target_of(
                    d.local_target_params
                        .as_ref()
                        .expect("reset before training"),
                )?;
                a += da;
                l += dl;
            }
            (with_sources.then_some(s / k), a / k, l / k)
        };
        Ok(RoundMetrics {
            round: 0,
            source_acc,
            target_acc,
            target_loss,
            device_weights: Vec::new(),
            wall_ms: 0.0,
        })
    }

    fn finish(self, metrics: Vec<RoundMetrics>, source_phase_rounds: usize) -> RunOutput {
        RunOutput {
            metrics,
            global_sources: self.global_sources,
            global_target: self.global_target,
            source_aggregations: self.source_aggregations,
            target_aggregations: self.target_aggregations,
            source_phase_rounds,
        }
    }
}

fn never(_: &[RoundMetrics]) -> bool {
    false
}

/// Parallel schedule: source and target models advance in the same round.
pub fn run_fssda(config: &FederationConfig, fed: &mut Federation) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    let plan = Plan {
        federated: true,
        source: SourceStep::Train,
        target: TargetStep::Distill,
    };
    let metrics = engine.run(fed, plan, config.rounds, 1, &never)?;
    Ok(engine.finish(metrics, 0))
}

/// True once the last `patience` round-to-round source accuracy changes all
/// stay below `tolerance_pp` percentage points.
pub fn source_converged(metrics: &[RoundMetrics], options: &SerialOptions) -> bool {
    if metrics.len() <= options.patience {
        return false;
    }
    let accs: Vec<f64> = metrics
        .iter()
        .rev()
        .take(options.patience + 1)
        .map(|m| m.source_acc.unwrap_or(0.0))
        .collect();
    accs.windows(2)
        .all(|w| (w[0] - w[1]).abs() * 100.0 < options.tolerance_pp)
}

/// Serial schedule: source-only rounds until convergence, then `config.rounds`
/// target rounds against the frozen source models. One round axis for both.
pub fn run_serial(config: &FederationConfig, fed: &mut Federation) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    let mut metrics = run_source_phase(&mut engine, fed)?;
    let phase_rounds = metrics.len();
    let plan = Plan {
        federated: true,
        source: SourceStep::Frozen,
        target: TargetStep::Distill,
    };
    metrics.extend(engine.run(fed, plan, config.rounds, phase_rounds + 1, &never)?);
    Ok(engine.finish(metrics, phase_rounds))
}

fn run_source_phase(engine: &mut Engine<'_>, fed: &mut Federation) -> Result<Vec<RoundMetrics>> {
    let options = engine.config.serial;
    let plan = Plan {
        federated: true,
        source: SourceStep::Train,
        target: TargetStep::Skip,
    };
    engine.run(fed, plan, options.max_source_rounds, 1, &|m| {
        source_converged(m, &options)
    })
}

/// Only the source-only phase of the serial schedule.
pub fn run_serial_source_phase(
    config: &FederationConfig,
    fed: &mut Federation,
) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    let metrics = run_source_phase(&mut engine, fed)?;
    let rounds = metrics.len();
    Ok(engine.finish(metrics, rounds))
}

/// Target rounds against fixed source models, as in the second serial phase.
pub fn run_target_with_frozen_sources(
    config: &FederationConfig,
    fed: &mut Federation,
    sources: &[ParamVector],
) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    if sources.len() != engine.global_sources.len() {
        return Err(Error::shape("one frozen model per source expected"));
    }
    engine.global_sources = sources.to_vec();
    let plan = Plan {
        federated: true,
        source: SourceStep::Frozen,
        target: TargetStep::Distill,
    };
    let metrics = engine.run(fed, plan, config.rounds, 1, &never)?;
    Ok(engine.finish(metrics, 0))
}

/// Federated training of the target model on labeled target rows only.
pub fn run_floly(config: &FederationConfig, fed: &mut Federation) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    let plan = Plan {
        federated: true,
        source: SourceStep::Frozen,
        target: TargetStep::LabeledOnly,
    };
    let mut metrics = engine.run(fed, plan, config.rounds, 1, &never)?;
    for m in &mut metrics {
        m.source_acc = None;
    }
    Ok(engine.finish(metrics, 0))
}

/// Every device trains its own source and target models with no server.
pub fn run_ssdaonly(config: &FederationConfig, fed: &mut Federation) -> Result<RunOutput> {
    let mut engine = Engine::start(config, fed)?;
    let plan = Plan {
        federated: false,
        source: SourceStep::Train,
        target: TargetStep::Distill,
    };
    let metrics = engine.run(fed, plan, config.rounds, 1, &never)?;
    Ok(engine.finish(metrics, 0))
}

/// Dispatches on `config.schedule`.
pub fn run_scheduled(config: &FederationConfig, fed: &mut Federation) -> Result<RunOutput> {
    match config.schedule {
        Schedule::Parallel => run_fssda(config, fed),
        Schedule::Serial => run_serial(config, fed),
    }
}
