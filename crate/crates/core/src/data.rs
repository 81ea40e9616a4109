//! Synthetic domain-shift benchmarks, Dirichlet device partitioning, and
//! semi-supervised label masking.
//!
//! Every domain is drawn from one shared Gaussian mixture whose class means
//! sit on a sphere. A domain's [`ShiftSpec`] pushes fresh mixture samples
//! through a class-preserving affine map, so class semantics agree across
//! domains while the feature distribution moves.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Re-draws allowed when a Dirichlet draw leaves some device without samples.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Affine map applied to mixture samples: `scale · rotate(x) + translation + noise`.
///
/// The rotation turns each consecutive coordinate pair `(0, 1), (2, 3), …`
/// by the same angle, so every vector moves by exactly that angle. With an
/// odd dimension the last coordinate is left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    /// Rotation angle in radians.
    pub rotation: f64,
    /// Per-coordinate offset; empty means no translation.
    pub translation: Vec<f64>,
    pub scale: f64,
    /// Standard deviation of isotropic Gaussian noise added after the map.
    pub noise: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise: 0.0,
        }
    }

    pub fn new(rotation: f64, scale: f64, noise: f64) -> Self {
        Self {
            rotation,
            translation: Vec::new(),
            scale,
            noise,
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::param(format!(
                "shift scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::param(format!(
                "shift noise must be non-negative, got {}",
                self.noise
            )));
        }
        if !self.rotation.is_finite() {
            return Err(Error::param("shift rotation must be finite"));
        }
        if !self.translation.is_empty() && self.translation.len() != feature_dim {
            return Err(Error::param(format!(
                "translation has {} entries, feature_dim is {feature_dim}",
                self.translation.len()
            )));
        }
        Ok(())
    }

    /// Deterministic part of the map (no noise), applied in place.
    pub fn apply(&self, x: &mut [f64]) {
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            for pair in x.chunks_exact_mut(2) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = c * a - s * b;
                pair[1] = s * a + c * b;
            }
        }
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Shape of the shared Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Radius of the sphere holding the class means.
    pub class_separation: f64,
    /// Within-class standard deviation.
    pub class_std: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::param("feature_dim must be at least 2"));
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::param("class_separation must be positive"));
        }
        if !(self.class_std >= 0.0) {
            return Err(Error::param("class_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    domain_id: String,
}

impl DomainDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        domain_id: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain_id: domain_id.into(),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain_id: self.domain_id.clone(),
        }
    }

    pub fn one_hot(&self) -> Array2<f64> {
        one_hot(&self.labels, self.num_classes)
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// One generated domain: its name, shift and sample count.
#[derive(Debug, Clone)]
pub struct DomainRequest {
    pub name: String,
    pub shift: ShiftSpec,
    pub samples: usize,
}

/// Source domains plus one target domain sharing class semantics.
#[derive(Debug, Clone)]
pub struct DomainFamily {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
}

/// Draws every requested domain from one mixture.
///
/// Class means are drawn first, then each source in order, then the target,
/// all from a single stream seeded by `seed`.
pub fn make_domain_family(
    seed: u64,
    mixture: &MixtureSpec,
    sources: &[DomainRequest],
    target: &DomainRequest,
) -> Result<DomainFamily> {
    mixture.validate()?;
    if sources.is_empty() {
        return Err(Error::param("at least one source domain is required"));
    }
    for req in sources.iter().chain(std::iter::once(target)) {
        req.shift.validate(mixture.feature_dim)?;
        if req.samples < mixture.num_classes {
            return Err(Error::param(format!(
                "domain `{}` needs at least {} samples, got {}",
                req.name, mixture.num_classes, req.samples
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(&mut rng, mixture);
    let sources = sources
        .iter()
        .map(|req| draw_domain(&mut rng, mixture, &means, req))
        .collect();
    let target = draw_domain(&mut rng, mixture, &means, target);
    Ok(DomainFamily { sources, target })
}

/// Unshifted source domain plus a target pushed through `shift`.
pub fn make_domain_pair(
    seed: u64,
    mixture: &MixtureSpec,
    n_source: usize,
    n_target: usize,
    shift: &ShiftSpec,
) -> Result<(DomainDataset, DomainDataset)> {
    let source = DomainRequest {
        name: "source".into(),
        shift: ShiftSpec::identity(),
        samples: n_source,
    };
    let target = DomainRequest {
        name: "target".into(),
        shift: shift.clone(),
        samples: n_target,
    };
    let mut family = make_domain_family(seed, mixture, &[source], &target)?;
    Ok((family.sources.remove(0), family.target))
}

/// Class means: Gaussian directions normalized onto the separation sphere.
pub fn class_means<R: Rng + ?Sized>(rng: &mut R, mixture: &MixtureSpec) -> Array2<f64> {
    let mut means = Array2::zeros((mixture.num_classes, mixture.feature_dim));
    for mut row in means.outer_iter_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-8 {
                row.mapv_inplace(|v| v * mixture.class_separation / norm);
                break;
            }
        }
    }
    means
}

fn draw_domain<R: Rng + ?Sized>(
    rng: &mut R,
    mixture: &MixtureSpec,
    means: &Array2<f64>,
    req: &DomainRequest,
) -> DomainDataset {
    let d = mixture.feature_dim;
    let mut labels: Vec<usize> = (0..req.samples).map(|i| i % mixture.num_classes).collect();
    labels.shuffle(rng);
    let mut features = Array2::zeros((req.samples, d));
    let mut row = vec![0.0; d];
    for (i, &label) in labels.iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[[label, j]] + mixture.class_std * rng.sample::<f64, _>(StandardNormal);
        }
        req.shift.apply(&mut row);
        for (j, v) in row.iter().enumerate() {
            features[[i, j]] = v + req.shift.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    DomainDataset {
        features,
        labels,
        num_classes: mixture.num_classes,
        domain_id: req.name.clone(),
    }
}

/// Per-device sample indices. Always an exact partition of `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
}

impl PartitionPlan {
    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Draws a point on the `k`-simplex from a symmetric Dirichlet(beta).
pub fn dirichlet_proportions<R: Rng + ?Sized>(
    rng: &mut R,
    beta: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::param(format!("Dirichlet concentration {beta}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // All draws can underflow to zero for tiny concentrations.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Splits `n` items by `proportions` using largest-remainder rounding.
///
/// Ties in the fractional parts go to the lower index.
pub fn apportion(proportions: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    if assigned <= n {
        for &i in order.iter().cycle().take(n - assigned) {
            counts[i] += 1;
        }
    } else {
        // Only reachable through rounding in the quotas.
        let mut excess = assigned - n;
        for &i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

/// Label-skewed partition: for each class, device shares follow Dirichlet(beta).
///
/// Each device's index list is returned in ascending order.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    num_devices: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_devices == 0 {
        return Err(Error::param("num_devices must be at least 1"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param(format!("beta must be positive, got {beta}")));
    }
    if labels.len() < num_devices {
        return Err(Error::Partition {
            attempts: 0,
            reason: format!(
                "{} samples cannot cover {num_devices} devices",
                labels.len()
            ),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::param(format!("label {bad} out of range")));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignments = vec![Vec::new(); num_devices];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let shares = dirichlet_proportions(&mut rng, beta, num_devices)?;
            let counts = apportion(&shares, members.len());
            let mut rest = members.as_slice();
            for (device, &count) in assignments.iter_mut().zip(&counts) {
                let (take, tail) = rest.split_at(count);
                device.extend_from_slice(take);
                rest = tail;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan { assignments, beta });
        }
    }
    Err(Error::Partition {
        attempts: MAX_PARTITION_ATTEMPTS,
        reason: "some device received no samples on every draw".into(),
    })
}

/// Ground-truth labels kept beside a target shard for evaluation only.
///
/// Every read goes through [`HeldOutLabels::reveal`], which bumps a counter
/// shared by all shards cut from the same [`MaskedTarget`].
#[derive(Debug, Clone)]
pub struct HeldOutLabels {
    labels: Vec<usize>,
    reads: Arc<AtomicUsize>,
}

impl HeldOutLabels {
    pub fn reveal(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The part of a target shard that training may see.
#[derive(Debug, Clone)]
pub struct TargetView {
    pub features: Array2<f64>,
    /// One-hot for labeled rows, all-zero (fake label) otherwise.
    pub hard_labels: Array2<f64>,
    pub labeled_mask: Vec<bool>,
}

impl TargetView {
    pub fn len(&self) -> usize {
        self.labeled_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled_mask.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    /// Only the labeled rows, as (features, one-hot labels).
    pub fn labeled_rows(&self) -> (Array2<f64>, Array2<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labeled_mask[i]).collect();
        (
            self.features.select(Axis(0), &idx),
            self.hard_labels.select(Axis(0), &idx),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TargetShard {
    view: TargetView,
    true_labels: HeldOutLabels,
}

impl TargetShard {
    pub fn view(&self) -> &TargetView {
        &self.view
    }

    pub fn true_labels(&self) -> &HeldOutLabels {
        &self.true_labels
    }
}

/// Target pool after masking, before it is cut into device shards.
#[derive(Debug, Clone)]
pub struct MaskedTarget {
    shard: TargetShard,
    num_classes: usize,
}

impl MaskedTarget {
    pub fn view(&self) -> &TargetView {
        &self.shard.view
    }

    pub fn true_labels(&self) -> &HeldOutLabels {
        &self.shard.true_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Rows at `indices` as a device shard sharing this pool's read counter.
    pub fn shard(&self, indices: &[usize]) -> TargetShard {
        let v = &self.shard.view;
        TargetShard {
            view: TargetView {
                features: v.features.select(Axis(0), indices),
                hard_labels: v.hard_labels.select(Axis(0), indices),
                labeled_mask: indices.iter().map(|&i| v.labeled_mask[i]).collect(),
            },
            true_labels: HeldOutLabels {
                labels: indices
                    .iter()
                    .map(|&i| self.shard.true_labels.labels[i])
                    .collect(),
                reads: Arc::clone(&self.shard.true_labels.reads),
            },
        }
    }
}

/// Keeps exactly `labeled_per_class` labels per class; every other row gets
/// an all-zero fake label.
pub fn mask_labels(
    dataset: &DomainDataset,
    labeled_per_class: usize,
    seed: u64,
) -> Result<MaskedTarget> {
    let counts = dataset.class_counts();
    if let Some((c, &n)) = counts
        .iter()
        .enumerate()
        .find(|(_, &n)| n < labeled_per_class)
    {
        return Err(Error::param(format!(
            "class {c} has {n} samples, cannot label {labeled_per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels()[i] == class)
            .collect();
        members.shuffle(&mut rng);
        for &i in &members[..labeled_per_class] {
            mask[i] = true;
        }
    }
    let mut hard = Array2::zeros((dataset.len(), dataset.num_classes()));
    for (i, &labeled) in mask.iter().enumerate() {
        if labeled {
            hard[[i, dataset.labels()[i]]] = 1.0;
        }
    }
    Ok(MaskedTarget {
        shard: TargetShard {
            view: TargetView {
                features: dataset.features().clone(),
                hard_labels: hard,
                labeled_mask: mask,
            },
            true_labels: HeldOutLabels {
                labels: dataset.labels().to_vec(),
                reads: Arc::new(AtomicUsize::new(0)),
            },
        },
        num_classes: dataset.num_classes(),
    })
}

/// Stratified train/test index split; both index lists are ascending.
pub fn split_test_indices(
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::param(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = members.len();
        let n_test = (n as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Error::param(format!(
                "test_fraction {test_fraction} leaves class {class} ({n} samples) empty on one side"
            )));
        }
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Returns `(train, test)`.
pub fn split_test(
    dataset: &DomainDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let (train, test) =
        split_test_indices(dataset.labels(), dataset.num_classes(), test_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Writes datasets as CSV with header `x0,…,x{d-1},label,domain_id`.
pub fn write_datasets_csv(path: impl AsRef<Path>, datasets: &[&DomainDataset]) -> Result<()> {
    let path = path.as_ref();
    let first = datasets
        .first()
        .ok_or_else(|| Error::param("nothing to write"))?;
    let d = first.feature_dim();
    if datasets.iter().any(|ds| ds.feature_dim() != d) {
        return Err(Error::shape("datasets in one CSV must share feature_dim"));
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push("domain_id".into());
    writer.write_record(&header)?;
    for ds in datasets {
        for (row, &label) in ds.features().outer_iter().zip(ds.labels()) {
            let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            record.push(label.to_string());
            record.push(ds.domain_id().to_string());
            writer.write_record(&record)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_datasets_csv`], one dataset per domain id
/// in order of first appearance. `num_classes` is one past the largest label.
pub fn read_datasets_csv(path: impl AsRef<Path>) -> Result<Vec<DomainDataset>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    if header.len() < 3
        || &header[header.len() - 2] != "label"
        || &header[header.len() - 1] != "domain_id"
    {
        return Err(Error::param(
            "dataset CSV header must end with label,domain_id",
        ));
    }
    let d = header.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| Error::param(format!("row {}: bad {what}", line + 2));
        let mut feats = Vec::with_capacity(d);
        for j in 0..d {
            feats.push(record[j].parse::<f64>().map_err(|_| bad("feature"))?);
        }
        let label: usize = record[d].parse().map_err(|_| bad("label"))?;
        let id = &record[d + 1];
        let slot = match order.iter().position(|o| o == id) {
            Some(s) => s,
            None => {
                order.push(id.to_string());
                rows.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        rows[slot].0.extend(feats);
        rows[slot].1.push(label);
    }
    let num_classes = rows
        .iter()
        .flat_map(|(_, l)| l.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    order
        .into_iter()
        .zip(rows)
        .map(|(id, (flat, labels))| {
            let n = labels.len();
            let features =
                Array2::from_shape_vec((n, d), flat).map_err(|e| Error::shape(e.to_string()))?;
            DomainDataset::new(features, labels, num_classes, id)
        })
        .collect()
}
