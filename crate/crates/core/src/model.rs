//! Small differentiable classifiers with hand-written backward passes.
//!
//! Two families share one flat parameter layout:
//!
//! * `hidden_dim == 0`: multinomial logistic regression, `z = x·W1 + b1`.
//! * `hidden_dim > 0`: one tanh hidden layer, `z = tanh(x·W1 + b1)·W2 + b2`.
//!
//! Parameters are stored as `[W1 row-major | b1 | W2 row-major | b2]`, where
//! `W1` is `input_dim × first_width` and the `W2`/`b2` blocks are absent for
//! the linear family. Row-major means `W1[i][j]` lives at `i * first_width + j`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Lower clamp applied inside `ln` so a zero probability never yields infinity.
pub const LOG_EPSILON: f64 = 1e-12;

/// Tolerance for the row-sum check on target rows.
const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::param("input_dim must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, 0, num_classes)
    }

    /// Width of the first affine layer's output.
    fn first_width(&self) -> usize {
        if self.hidden_dim == 0 {
            self.num_classes
        } else {
            self.hidden_dim
        }
    }

    pub fn num_params(&self) -> usize {
        let w = self.first_width();
        let first = self.input_dim * w + w;
        if self.hidden_dim == 0 {
            first
        } else {
            first + self.hidden_dim * self.num_classes + self.num_classes
        }
    }

    fn offsets(&self) -> Layout {
        let w = self.first_width();
        let w1 = 0..self.input_dim * w;
        let b1 = w1.end..w1.end + w;
        let w2 = b1.end..b1.end + self.hidden_dim * self.num_classes;
        let b2 = w2.end
            ..w2.end
                + if self.hidden_dim == 0 {
                    0
                } else {
                    self.num_classes
                };
        Layout { w1, b1, w2, b2 }
    }
}

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

/// Flat model parameters tied to the [`ModelSpec`] that gives them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec: ModelSpec,
}

impl ParamVector {
    pub fn from_vec(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_params() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, spec needs {}",
                values.len(),
                spec.num_params()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, spec })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
            spec,
        }
    }

    /// Uniform(-0.1, 0.1) initialization.
    pub fn init_uniform<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Self {
        let values = (0..spec.num_params())
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Self { values, spec }
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_spec(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn check_same_spec(&self, other: &ParamVector) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::shape(format!(
                "parameter specs differ: {:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        Ok(())
    }

    fn w1(&self) -> ArrayView2<'_, f64> {
        let l = self.spec.offsets();
        ArrayView2::from_shape(
            (self.spec.input_dim, self.spec.first_width()),
            &self.values[l.w1],
        )
        .expect("layout is consistent with spec")
    }

    fn b1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.spec.offsets().b1])
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        let l = self.spec.offsets();
        ArrayView2::from_shape(
            (self.spec.hidden_dim, self.spec.num_classes),
            &self.values[l.w2],
        )
        .expect("layout is consistent with spec")
    }

    fn b2(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.spec.offsets().b2])
    }
}

/// Features paired with per-row targets (one-hot, soft, or all-zero fake labels).
#[derive(Debug, Clone)]
pub struct Batch {
    features: Array2<f64>,
    targets: Array2<f64>,
}

impl Batch {
    pub fn new(features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::shape(format!(
                "batch has {} feature rows but {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        for (i, row) in targets.outer_iter().enumerate() {
            if row.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(Error::param(format!(
                    "target row {i} has entries outside [0, 1]"
                )));
            }
            let s = row.sum();
            if s.abs() > ROW_SUM_TOLERANCE && (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::param(format!(
                    "target row {i} sums to {s}; expected 0 or 1"
                )));
            }
        }
        Ok(Self { features, targets })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

fn check_features(spec: &ModelSpec, features: &ArrayView2<'_, f64>) -> Result<()> {
    if features.ncols() != spec.input_dim {
        return Err(Error::shape(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Forward pass returning the hidden activations (if any) and the logits.
fn forward_parts(
    params: &ParamVector,
    features: &ArrayView2<'_, f64>,
) -> Result<(Option<Array2<f64>>, Array2<f64>)> {
    let spec = params.spec();
    check_features(&spec, features)?;
    let first = features.dot(&params.w1()) + params.b1();
    if spec.hidden_dim == 0 {
        return Ok((None, first));
    }
    let hidden = first.mapv(f64::tanh);
    let logits = hidden.dot(&params.w2()) + params.b2();
    Ok((Some(hidden), logits))
}

pub fn forward_logits(params: &ParamVector, features: &Array2<f64>) -> Result<Array2<f64>> {
    forward_parts(params, &features.view()).map(|(_, z)| z)
}

/// Row-wise `softmax(logits / temperature)`, stabilized by max subtraction.
pub fn softmax_t(logits: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Mean over rows of `-Σ_c t_c · ln(max(p_c, LOG_EPSILON))`.
///
/// Zero-weight entries are skipped entirely, so an all-zero (fake-label)
/// row contributes exactly 0.
pub fn cross_entropy(targets: &Array2<f64>, probs: &Array2<f64>) -> Result<f64> {
    if targets.dim() != probs.dim() {
        return Err(Error::shape(format!(
            "targets {:?} and probabilities {:?} differ",
            targets.dim(),
            probs.dim()
        )));
    }
    let n = targets.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (t_row, p_row) in targets.outer_iter().zip(probs.outer_iter()) {
        for (&t, &p) in t_row.iter().zip(p_row.iter()) {
            if t > 0.0 {
                total -= t * p.max(LOG_EPSILON).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// Loss value matching [`grad`]: cross-entropy of targets against `softmax_t(logits)`.
pub fn loss(params: &ParamVector, batch: &Batch, temperature: f64) -> Result<f64> {
    let logits = forward_logits(params, batch.features())?;
    cross_entropy(batch.targets(), &softmax_t(&logits, temperature)?)
}

/// Analytic gradient of [`loss`] with respect to every parameter.
pub fn grad(params: &ParamVector, batch: &Batch, temperature: f64) -> Result<ParamVector> {
    let spec = params.spec();
    if batch.is_empty() {
        return Err(Error::param("gradient of an empty batch"));
    }
    if batch.targets().ncols() != spec.num_classes {
        return Err(Error::shape(format!(
            "targets have {} columns, model has {} classes",
            batch.targets().ncols(),
            spec.num_classes
        )));
    }
    let x = batch.features().view();
    let (hidden, logits) = forward_parts(params, &x)?;
    let probs = softmax_t(&logits, temperature)?;
    let y = batch.targets();
    let scale = 1.0 / (temperature * batch.len() as f64);

    // dL/dz = (rowsum(y)·p − y) / (T·N)
    let row_mass = y.sum_axis(Axis(1)).insert_axis(Axis(1));
    let dz = (&probs * &row_mass - y) * scale;

    let layout = spec.offsets();
    let mut out = vec![0.0; spec.num_params()];
    match hidden {
        None => {
            write_block(&mut out[layout.w1], x.t().dot(&dz));
            write_row(&mut out[layout.b1], dz.sum_axis(Axis(0)));
        }
        Some(h) => {
            write_block(&mut out[layout.w2], h.t().dot(&dz));
            write_row(&mut out[layout.b2], dz.sum_axis(Axis(0)));
            let dh = dz.dot(&params.w2().t());
            let da = dh * h.mapv(|a| 1.0 - a * a);
            write_block(&mut out[layout.w1], x.t().dot(&da));
            write_row(&mut out[layout.b1], da.sum_axis(Axis(0)));
        }
    }
    Ok(ParamVector { values: out, spec })
}

fn write_block(dst: &mut [f64], block: Array2<f64>) {
    for (d, v) in dst.iter_mut().zip(block.iter()) {
        *d = *v;
    }
}

fn write_row(dst: &mut [f64], row: ndarray::Array1<f64>) {
    for (d, v) in dst.iter_mut().zip(row.iter()) {
        *d = *v;
    }
}

pub fn sgd_step(
    params: &ParamVector,
    gradient: &ParamVector,
    learning_rate: f64,
) -> Result<ParamVector> {
    params.check_same_spec(gradient)?;
    let values = params
        .values
        .iter()
        .zip(&gradient.values)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    Ok(ParamVector {
        values,
        spec: params.spec,
    })
}

/// Elementwise convex combination `Σ_i w_i · v_i`.
pub fn combine(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::param("cannot combine an empty list of vectors"))?;
    if vectors.len() != weights.len() {
        return Err(Error::param(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    for v in &vectors[1..] {
        first.check_same_spec(v)?;
    }
    let mut values = vec![0.0; first.len()];
    for (v, &w) in vectors.iter().zip(weights) {
        for (acc, x) in values.iter_mut().zip(&v.values) {
            *acc += w * x;
        }
    }
    Ok(ParamVector {
        values,
        spec: first.spec,
    })
}

/// Unweighted elementwise mean.
pub fn average_params(locals: &[ParamVector]) -> Result<ParamVector> {
    let weights = vec![1.0; locals.len()];
    weighted_average_params(locals, &weights)
}

/// Elementwise mean with non-negative weights (normalized internally).
///
/// Each coordinate is accumulated in ascending (value, weight) order as an
/// offset from the smallest value, so the result is independent of input
/// order, exact on identical inputs, and always within the coordinate's
/// `[min, max]`.
pub fn weighted_average_params(locals: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = locals
        .first()
        .ok_or_else(|| Error::param("cannot average an empty list of parameters"))?;
    if locals.len() != weights.len() {
        return Err(Error::param(format!(
            "{} parameter vectors but {} weights",
            locals.len(),
            weights.len()
        )));
    }
    for p in &locals[1..] {
        first.check_same_spec(p)?;
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::param(
            "aggregation weights must be finite and non-negative",
        ));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::param("aggregation weights sum to zero"));
    }

    let mut column: Vec<(f64, f64)> = Vec::with_capacity(locals.len());
    let values = (0..first.len())
        .map(|i| {
            column.clear();
            column.extend(locals.iter().zip(weights).map(|(p, &w)| (p.values[i], w)));
            column.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let lo = column[0].0;
            let hi = column[column.len() - 1].0;
            let total: f64 = column.iter().map(|&(_, w)| w).sum();
            let offset: f64 = column.iter().map(|&(v, w)| w * (v - lo)).sum::<f64>() / total;
            (lo + offset).clamp(lo, hi)
        })
        .collect();
    Ok(ParamVector {
        values,
        spec: first.spec,
    })
}

pub fn predict(params: &ParamVector, features: &Array2<f64>) -> Result<Vec<usize>> {
    let logits = forward_logits(params, features)?;
    Ok(logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &z)| {
                    if z > best.1 {
                        (c, z)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

/// Fraction of rows whose argmax logit equals the label; 0 for empty input.
pub fn accuracy(params: &ParamVector, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if features.nrows() != labels.len() {
        return Err(Error::shape("feature rows and labels differ in length"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predict(params, features)?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
