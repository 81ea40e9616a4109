//! Soft labels, the hard/soft mixed loss, and selection of imitation weights.
//!
//! Weight index 0 always belongs to the hard-label term; indices `1..=S`
//! belong to the soft labels of each source model, in source order.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ParamVector};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Below this norm the hard-label gradient is treated as absent.
pub const GRAD_EPSILON: f64 = 1e-12;

/// Below this squared distance the hard and soft gradients are treated as equal.
pub const DENOM_EPSILON: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Temperature-softened predictions of one source model on target features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    probs: Array2<f64>,
    temperature: f64,
    source_id: String,
}

impl SoftLabelSet {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }
}

pub fn gen_soft_labels(
    source_params: &ParamVector,
    target_features: &Array2<f64>,
    temperature: f64,
    source_id: impl Into<String>,
) -> Result<SoftLabelSet> {
    let logits = model::forward_logits(source_params, target_features)?;
    Ok(SoftLabelSet {
        probs: model::softmax_t(&logits, temperature)?,
        temperature,
        source_id: source_id.into(),
    })
}

/// Convex weights over the hard term and each soft term.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationWeights {
    lambdas: Vec<f64>,
}

impl ImitationWeights {
    /// Single-source weights `(λ, 1 − λ)`.
    pub fn single(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::param(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(Self {
            lambdas: vec![lambda, 1.0 - lambda],
        })
    }

    pub fn from_vec(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.len() < 2 {
            return Err(Error::param(
                "need a hard weight and at least one soft weight",
            ));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::param(
                "imitation weights must be finite and non-negative",
            ));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::param(format!(
                "imitation weights sum to {sum}, not 1"
            )));
        }
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn hard(&self) -> f64 {
        self.lambdas[0]
    }

    pub fn soft(&self) -> &[f64] {
        &self.lambdas[1..]
    }

    pub fn num_sources(&self) -> usize {
        self.lambdas.len() - 1
    }
}

/// `λ·CE(hard, softmax(z)) + (1 − λ)·CE(soft, softmax(z / T))`, averaged over
/// every row; fake-label rows only feed the soft term.
pub fn mixed_loss(
    target_params: &ParamVector,
    features: &Array2<f64>,
    hard_labels: &Array2<f64>,
    soft_labels: &SoftLabelSet,
    lambda: f64,
) -> Result<f64> {
    let weights = ImitationWeights::single(lambda)?;
    multi_source_loss(
        target_params,
        features,
        hard_labels,
        std::slice::from_ref(soft_labels),
        &weights,
    )
}

/// Hard term at temperature 1 plus every soft term at its own temperature.
pub fn multi_source_loss(
    target_params: &ParamVector,
    features: &Array2<f64>,
    hard_labels: &Array2<f64>,
    soft_label_sets: &[SoftLabelSet],
    weights: &ImitationWeights,
) -> Result<f64> {
    if weights.num_sources() != soft_label_sets.len() {
        return Err(Error::param(format!(
            "{} soft weights for {} soft label sets",
            weights.num_sources(),
            soft_label_sets.len()
        )));
    }
    let logits = model::forward_logits(target_params, features)?;
    let mut total =
        weights.hard() * model::cross_entropy(hard_labels, &model::softmax_t(&logits, 1.0)?)?;
    for (soft, &w) in soft_label_sets.iter().zip(weights.soft()) {
        let pred = model::softmax_t(&logits, soft.temperature)?;
        total += w * model::cross_entropy(&soft.probs, &pred)?;
    }
    Ok(total)
}

/// Per-term gradients of the distillation objective on one fixed data set.
///
/// Builds the hard and soft batches once so the gradients can be re-evaluated
/// cheaply every epoch.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    hard: Batch,
    soft: Vec<(Batch, f64)>,
}

impl DistillTerms {
    pub fn new(
        features: &Array2<f64>,
        hard_labels: &Array2<f64>,
        soft_label_sets: &[SoftLabelSet],
    ) -> Result<Self> {
        if soft_label_sets.is_empty() {
            return Err(Error::param("at least one soft label set is required"));
        }
        let hard = Batch::new(features.clone(), hard_labels.clone())?;
        let soft = soft_label_sets
            .iter()
            .map(|s| {
                Ok((
                    Batch::new(features.clone(), s.probs.clone())?,
                    s.temperature,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { hard, soft })
    }

    pub fn num_sources(&self) -> usize {
        self.soft.len()
    }

    /// The same terms restricted to rows `idx`.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let pick = |b: &Batch| {
            Batch::new(
                b.features().select(Axis(0), idx),
                b.targets().select(Axis(0), idx),
            )
        };
        Ok(Self {
            hard: pick(&self.hard)?,
            soft: self
                .soft
                .iter()
                .map(|(b, t)| Ok((pick(b)?, *t)))
                .collect::<Result<_>>()?,
        })
    }

    /// `(g_hard, [g_soft_1, …, g_soft_S])` at `params`.
    pub fn gradients(&self, params: &ParamVector) -> Result<(ParamVector, Vec<ParamVector>)> {
        let hard = model::grad(params, &self.hard, 1.0)?;
        let soft = self
            .soft
            .iter()
            .map(|(batch, t)| model::grad(params, batch, *t))
            .collect::<Result<_>>()?;
        Ok((hard, soft))
    }
}

/// Gradient of the weighted objective: `λ_0·g_hard + Σ_j λ_j·g_soft_j`.
pub fn combined_gradient(
    grad_hard: &ParamVector,
    grad_soft: &[ParamVector],
    weights: &ImitationWeights,
) -> Result<ParamVector> {
    let mut vectors = Vec::with_capacity(grad_soft.len() + 1);
    vectors.push(grad_hard);
    vectors.extend(grad_soft.iter());
    model::combine(&vectors, weights.lambdas())
}

/// Closed-form minimizer of `‖λ·g_hard + (1 − λ)·g_soft‖²` over `[0, 1]`.
///
/// A vanishing hard gradient (no labeled rows) returns 0 so the device keeps
/// learning from soft labels; coincident gradients return 0.5.
pub fn adaptive_lambda(grad_hard: &ParamVector, grad_soft: &ParamVector) -> Result<f64> {
    grad_hard.check_same_spec(grad_soft)?;
    if grad_hard.norm_squared().sqrt() < GRAD_EPSILON {
        return Ok(0.0);
    }
    let (h, s) = (grad_hard.values(), grad_soft.values());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&hi, &si) in h.iter().zip(s) {
        num += si * (si - hi);
        den += (hi - si) * (hi - si);
    }
    if den < DENOM_EPSILON {
        return Ok(0.5);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrankWolfeOptions {
    pub max_iters: usize,
    /// Stop once the duality gap falls below this value.
    pub tol: f64,
    /// Solve on unit-normalized gradients, then map the weights back so they
    /// apply to the raw terms.
    pub normalize: bool,
}

impl Default for FrankWolfeOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrankWolfeResult {
    pub weights: ImitationWeights,
    /// `‖Σ λ g‖²` at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Iterate after every accepted step, starting from the uniform point.
    pub weight_trace: Vec<Vec<f64>>,
    pub gap: f64,
    pub iterations: usize,
}

/// Min-norm point of the convex hull of `gradients`, by Frank-Wolfe with exact
/// line search on the Gram matrix.
pub fn frank_wolfe_simplex(
    gradients: &[&ParamVector],
    options: &FrankWolfeOptions,
) -> Result<FrankWolfeResult> {
    if gradients.len() < 2 {
        return Err(Error::param(format!(
            "Frank-Wolfe needs at least 2 gradients, got {}",
            gradients.len()
        )));
    }
    for g in &gradients[1..] {
        gradients[0].check_same_spec(g)?;
    }
    let n = gradients.len();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = gradients[i].dot(gradients[j])?;
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let norms: Vec<f64> = (0..n).map(|i| gram[i][i].sqrt()).collect();
    if options.normalize {
        let scale: Vec<f64> = norms
            .iter()
            .map(|&s| if s > GRAD_EPSILON { 1.0 / s } else { 1.0 })
            .collect();
        for i in 0..n {
            for j in 0..n {
                gram[i][j] *= scale[i] * scale[j];
            }
        }
    }

    let mut result = min_norm_on_gram(&gram, options);
    if options.normalize {
        // Σ λ_i g_i/‖g_i‖ is parallel to Σ (λ_i/‖g_i‖) g_i.
        let mut raw: Vec<f64> = result
            .weight_trace
            .last()
            .expect("trace starts non-empty")
            .iter()
            .zip(&norms)
            .map(|(&l, &s)| if s > GRAD_EPSILON { l / s } else { l })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|l| *l /= total);
        result.weights = ImitationWeights { lambdas: raw };
    }
    Ok(result)
}

fn min_norm_on_gram(gram: &[Vec<f64>], options: &FrankWolfeOptions) -> FrankWolfeResult {
    let n = gram.len();
    let quad = |l: &[f64]| -> (Vec<f64>, f64) {
        let ml: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| gram[i][j] * l[j]).sum())
            .collect();
        let obj = l.iter().zip(&ml).map(|(a, b)| a * b).sum();
        (ml, obj)
    };

    let mut lambdas = vec![1.0 / n as f64; n];
    let (mut ml, mut obj) = quad(&lambdas);
    let mut objective_trace = vec![obj];
    let mut weight_trace = vec![lambdas.clone()];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;

    while iterations < options.max_iters {
        let j = (0..n)
            .min_by(|&a, &b| ml[a].total_cmp(&ml[b]))
            .expect("at least two vertices");
        gap = obj - ml[j];
        if gap < options.tol {
            break;
        }
        // f(γ) = (1−γ)²a + 2γ(1−γ)b + γ²c along the segment towards e_j.
        let (a, b, c) = (obj, ml[j], gram[j][j]);
        let denom = a - 2.0 * b + c;
        let gamma = if denom > 0.0 {
            ((a - b) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        if gamma == 0.0 {
            break;
        }
        let next: Vec<f64> = lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| (1.0 - gamma) * l + if i == j { gamma } else { 0.0 })
            .collect();
        let (next_ml, next_obj) = quad(&next);
        if next_obj > obj {
            // Rounding noise at the optimum; the iterate cannot improve further.
            break;
        }
        lambdas = next;
        ml = next_ml;
        obj = next_obj;
        objective_trace.push(obj);
        weight_trace.push(lambdas.clone());
        iterations += 1;
    }
    if iterations == options.max_iters {
        let j = (0..n)
            .min_by(|&a, &b| ml[a].total_cmp(&ml[b]))
            .expect("at least two vertices");
        gap = obj - ml[j];
    }

    FrankWolfeResult {
        weights: ImitationWeights { lambdas },
        objective_trace,
        weight_trace,
        gap,
        iterations,
    }
}

/// Weights for one local epoch under the adaptive policy.
///
/// One source uses the closed form. Several sources use Frank-Wolfe over all
/// terms; when the hard gradient vanishes it is left out (its weight pinned to
/// 0) because the all-hard vertex would otherwise be a trivial zero-norm
/// solution that stops learning.
pub fn adaptive_weights(
    grad_hard: &ParamVector,
    grad_soft: &[ParamVector],
    options: &FrankWolfeOptions,
) -> Result<ImitationWeights> {
    match grad_soft {
        [] => Err(Error::param("at least one soft gradient is required")),
        [single] => ImitationWeights::single(adaptive_lambda(grad_hard, single)?),
        many => {
            if grad_hard.norm_squared().sqrt() < GRAD_EPSILON {
                let softs: Vec<&ParamVector> = many.iter().collect();
                let fw = frank_wolfe_simplex(&softs, options)?;
                let mut lambdas = vec![0.0];
                lambdas.extend_from_slice(fw.weights.lambdas());
                Ok(ImitationWeights { lambdas })
            } else {
                let mut all = vec![grad_hard];
                all.extend(many.iter());
                Ok(frank_wolfe_simplex(&all, options)?.weights)
            }
        }
    }
}
