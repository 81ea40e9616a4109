#![allow(dead_code)]

use fssda_core::distill::{self, DistillTerms};
use fssda_core::experiment::runner::{self, PreparedData};
use fssda_core::experiment::{ExperimentConfig, Mode};
use fssda_core::federation::{self, FederationConfig, LabeledSet};
use fssda_core::model::{self, Batch, ModelSpec, ParamVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian_params<R: Rng>(rng: &mut R, spec: ModelSpec, scale: f64) -> ParamVector {
    let v = gaussian_vec(rng, spec.num_params())
        .into_iter()
        .map(|x| x * scale)
        .collect();
    ParamVector::from_vec(spec, v).unwrap()
}

/// Rows are one-hot, all-zero (fake) or a random distribution, per `kind`.
pub enum Targets {
    Hard { fake_fraction: f64 },
    Soft,
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, d: usize, c: usize, targets: Targets) -> Batch {
    let x = Array2::from_shape_vec((n, d), gaussian_vec(rng, n * d)).unwrap();
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        match targets {
            Targets::Hard { fake_fraction } => {
                if rng.random::<f64>() >= fake_fraction {
                    y[[i, rng.random_range(0..c)]] = 1.0;
                }
            }
            Targets::Soft => {
                let w: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = w.iter().sum();
                for (k, v) in w.iter().enumerate() {
                    y[[i, k]] = v / s;
                }
            }
        }
    }
    Batch::new(x, y).unwrap()
}

/// Largest coordinate-wise relative error between the analytic gradient and
/// central finite differences of `model::loss`.
pub fn fd_max_relative_error(params: &ParamVector, batch: &Batch, temperature: f64) -> f64 {
    let analytic = model::grad(params, batch, temperature).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let bump = |delta: f64| {
            let mut v = params.values().to_vec();
            v[i] += delta;
            let p = ParamVector::from_vec(params.spec(), v).unwrap();
            model::loss(&p, batch, temperature).unwrap()
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

pub fn min_norm_objective(gh: &ParamVector, gs: &ParamVector, lambda: f64) -> f64 {
    gh.values()
        .iter()
        .zip(gs.values())
        .map(|(h, s)| {
            let v = lambda * h + (1.0 - lambda) * s;
            v * v
        })
        .sum()
}

/// `(argmin, min)` of the two-term objective over `points` evenly spaced λ in [0, 1].
pub fn lambda_grid(gh: &ParamVector, gs: &ParamVector, points: usize) -> (f64, f64) {
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .map(|l| (l, min_norm_objective(gh, gs, l)))
        .fold((0.0, f64::INFINITY), |best, cur| {
            if cur.1 < best.1 {
                cur
            } else {
                best
            }
        })
}

pub fn combined_norm_squared(grads: &[&ParamVector], weights: &[f64]) -> f64 {
    model::combine(grads, weights).unwrap().norm_squared()
}

/// Minimum of `‖Σ w_i g_i‖²` over the 2-simplex on a grid of the given step.
pub fn simplex_grid_min(grads: &[&ParamVector; 3], step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let a = i as f64 / n as f64;
            let b = j as f64 / n as f64;
            let c = (1.0 - a - b).max(0.0);
            best = best.min(combined_norm_squared(grads, &[a, b, c]));
        }
    }
    best
}

pub fn fw_objective(grads: &[&ParamVector], weights: &distill::ImitationWeights) -> f64 {
    combined_norm_squared(grads, weights.lambdas())
}

/// A scaled-down benchmark that trains in milliseconds.
pub fn small_config(rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.benchmark.source_samples = 400;
    c.benchmark.target_samples = 400;
    c.federation.rounds = rounds;
    c.experiment.seeds = vec![1, 2];
    c
}

pub fn small_data(config: &ExperimentConfig, mode: Mode, seed: u64) -> PreparedData {
    let single = [fssda_core::experiment::ShiftConfig::new(
        "source", 0.0, 1.0, 0.0,
    )];
    runner::prepare_data(config, &single, &config.pairs[0], mode, seed).unwrap()
}

/// Gaussian parameters with an overall scale drawn uniformly from `[lo, hi)`.
pub fn scaled_params<R: Rng>(rng: &mut R, spec: ModelSpec, lo: f64, hi: f64) -> ParamVector {
    let scale = rng.random_range(lo..hi);
    gaussian_params(rng, spec, scale)
}

pub struct CentralizedRun {
    pub source: ParamVector,
    pub target: ParamVector,
    pub target_accs: Vec<f64>,
}

/// Single-source adaptive training on the pooled data, written out with the
/// model and distillation primitives only.
pub fn centralized_run(fc: &FederationConfig, data: &PreparedData) -> CentralizedRun {
    let source = LabeledSet::from_dataset(&data.sources[0].train).unwrap();
    let view = data.target.view();
    let test = LabeledSet::from_dataset(&data.target_test).unwrap();
    let (sources, mut target) = federation::init_globals(data.spec, 1, fc.seed);
    let mut source_model = sources[0].clone();
    let mut target_accs = Vec::new();
    for _ in 0..fc.rounds {
        for _ in 0..fc.local_epochs {
            let g = model::grad(&source_model, source.batch(), 1.0).unwrap();
            source_model = model::sgd_step(&source_model, &g, fc.learning_rate).unwrap();
        }
        let soft =
            distill::gen_soft_labels(&source_model, &view.features, fc.temperature, "s").unwrap();
        let terms = DistillTerms::new(&view.features, &view.hard_labels, &[soft]).unwrap();
        for _ in 0..fc.local_epochs {
            let (gh, gs) = terms.gradients(&target).unwrap();
            let w = distill::adaptive_weights(&gh, &gs, &fc.frank_wolfe).unwrap();
            let g = distill::combined_gradient(&gh, &gs, &w).unwrap();
            target = model::sgd_step(&target, &g, fc.learning_rate).unwrap();
        }
        target_accs.push(model::accuracy(&target, test.features(), test.labels()).unwrap());
    }
    CentralizedRun {
        source: source_model,
        target,
        target_accs,
    }
}
