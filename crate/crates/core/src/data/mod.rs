//! Synthetic benchmark generation, splits, samplers, and CSV ingestion.
//!
//! The benchmark mirrors the data topology of the image task it stands in
//! for: an imbalanced multi-class ID distribution, an auxiliary OOD family
//! used during training, an unlabeled wild mixture, and held-out test OOD
//! sets of graded semantic distance (one near set placed between ID
//! clusters, two structurally different far sets).
//!
//! Every split accessor records itself in an [`AccessLog`], which is how
//! provenance assertions ("this method never touched OOD data during
//! training") are enforced in tests.

mod csvio;

pub use csvio::{export_labeled_csv, export_unlabeled_csv, ingest_csv, CsvSchema, IngestedSet};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Derive an independent RNG stream from a base seed and a purpose tag.
pub fn stream_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Labeled feature array; rows carry globally unique sample ids.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub ids: Vec<u64>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.view_cols()
    }

    /// Gather rows into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        gather(&self.features, indices)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            features: gather(&self.features, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// One-hot label matrix of width `classes` for the given rows.
    pub fn onehot(&self, indices: &[usize], classes: usize) -> Tensor {
        let mut data = vec![0.0; indices.len() * classes];
        for (r, &i) in indices.iter().enumerate() {
            data[r * classes + self.labels[i]] = 1.0;
        }
        Tensor::new(vec![indices.len(), classes], data).expect("sized by construction")
    }
}

/// Unlabeled feature array with sample ids.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    pub ids: Vec<u64>,
    pub features: Tensor,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.view_cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        gather(&self.features, indices)
    }
}

fn gather(features: &Tensor, indices: &[usize]) -> Tensor {
    let cols = features.view_cols();
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        data.extend_from_slice(features.row(i));
    }
    Tensor::new(vec![indices.len(), cols], data).expect("sized by construction")
}

/// Split tags for access accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    IdTrain,
    IdWildPool,
    IdVal,
    IdTest,
    AuxOodTrain,
    AuxOodVal,
    TestOod,
    WildTrain,
}

const N_SPLITS: usize = 8;

/// Atomic per-split access counters; shared read-only across threads.
#[derive(Debug, Default)]
pub struct AccessLog {
    counts: [AtomicU64; N_SPLITS],
}

impl AccessLog {
    fn record(&self, split: Split) {
        self.counts[split as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, split: Split) -> u64 {
        self.counts[split as usize].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// The generated benchmark: all splits plus the access log.
#[derive(Debug)]
pub struct BenchmarkData {
    id_train: LabeledSet,
    id_wild_pool: LabeledSet,
    id_val: LabeledSet,
    id_test: LabeledSet,
    aux_ood_train: UnlabeledSet,
    aux_ood_val: UnlabeledSet,
    test_ood_sets: BTreeMap<String, UnlabeledSet>,
    wild_train: UnlabeledSet,
    access: AccessLog,
}

impl BenchmarkData {
    pub fn id_train(&self) -> &LabeledSet {
        self.access.record(Split::IdTrain);
        &self.id_train
    }

    pub fn id_wild_pool(&self) -> &LabeledSet {
        self.access.record(Split::IdWildPool);
        &self.id_wild_pool
    }

    pub fn id_val(&self) -> &LabeledSet {
        self.access.record(Split::IdVal);
        &self.id_val
    }

    pub fn id_test(&self) -> &LabeledSet {
        self.access.record(Split::IdTest);
        &self.id_test
    }

    pub fn aux_ood_train(&self) -> &UnlabeledSet {
        self.access.record(Split::AuxOodTrain);
        &self.aux_ood_train
    }

    pub fn aux_ood_val(&self) -> &UnlabeledSet {
        self.access.record(Split::AuxOodVal);
        &self.aux_ood_val
    }

    pub fn test_ood_sets(&self) -> &BTreeMap<String, UnlabeledSet> {
        self.access.record(Split::TestOod);
        &self.test_ood_sets
    }

    pub fn wild_train(&self) -> &UnlabeledSet {
        self.access.record(Split::WildTrain);
        &self.wild_train
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.access
    }
}

/// Generator configuration. Defaults give a learnable five-class benchmark
/// in eight dimensions with the documented class imbalance profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub classes: usize,
    pub feature_dim: usize,
    /// Total ID sample count before splitting.
    pub total_id: usize,
    /// Per-class proportions; must sum to 1.
    pub class_proportions: Vec<f64>,
    /// Displacement of the whole ID arrangement along the diagonal; keeps
    /// convex combinations of class means at the same norm as the means.
    pub center_displacement: f64,
    /// Local radius at which class means sit around the arrangement center.
    pub mean_radius: f64,
    /// Distance between the two confusable class means (classes 0 and 1).
    /// Small gaps make the pair overlap the way visually similar classes do.
    pub confusable_gap: f64,
    /// Isotropic standard deviation of each ID cluster.
    pub cluster_scale: f64,
    /// Interpolation factor of the near-OOD cluster between the two closest
    /// class means, in (0,1).
    pub near_factor: f64,
    /// Off-manifold displacement of the near cluster along the trailing
    /// axes: visually close to the ID complex but off its manifold, and on
    /// the same semantic axis as the aux and far families (nearer in).
    pub near_offset: f64,
    pub near_count: usize,
    /// Displacement of the far Gaussian family along the trailing axes.
    pub far_displacement: f64,
    pub far_scale: f64,
    pub far_count: usize,
    /// Half-width of the hypercube shell family.
    pub shell_half_width: f64,
    /// Diagonal displacement of the shell center.
    pub shell_displacement: f64,
    /// Displacement of the auxiliary OOD family along the trailing axes
    /// (between the ID arrangement and the far family).
    pub aux_displacement: f64,
    pub aux_scale: f64,
    pub aux_total: usize,
    /// Fraction of wild data that is ID.
    pub wild_ratio: f64,
    /// train-pool / val / test fractions of the ID data.
    pub id_fractions: [f64; 3],
    /// Fraction of the training pool diverted to the wild pool.
    pub wild_fraction: f64,
    /// train / val fractions of the auxiliary OOD data.
    pub aux_fractions: [f64; 2],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 5,
            feature_dim: 8,
            total_id: 6000,
            class_proportions: vec![0.31, 0.29, 0.20, 0.12, 0.08],
            center_displacement: 3.0,
            mean_radius: 1.7,
            confusable_gap: 2.3,
            cluster_scale: 0.6,
            near_factor: 0.3,
            near_offset: 1.9,
            near_count: 600,
            far_displacement: 4.6,
            far_scale: 0.85,
            far_count: 600,
            shell_half_width: 1.0,
            shell_displacement: 3.2,
            aux_displacement: 3.0,
            aux_scale: 0.85,
            aux_total: 3000,
            wild_ratio: 0.5,
            id_fractions: [0.64, 0.16, 0.20],
            wild_fraction: 0.15,
            aux_fractions: [0.80, 0.20],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push("need at least two classes".to_string());
        }
        if self.feature_dim <= self.classes {
            problems.push(
                "feature_dim must exceed classes (class axes plus trailing OOD axes)".to_string(),
            );
        }
        if self.total_id == 0 || self.near_count == 0 || self.far_count == 0 || self.aux_total == 0
        {
            problems.push("sample counts must be positive".to_string());
        }
        if self.class_proportions.len() != self.classes {
            problems.push("class_proportions length must equal classes".to_string());
        }
        if self.class_proportions.iter().any(|&p| p <= 0.0)
            || (self.class_proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            problems.push("class_proportions must be positive and sum to 1".to_string());
        }
        if !(self.near_factor > 0.0 && self.near_factor < 1.0) {
            problems.push("near_factor must lie in (0,1)".to_string());
        }
        if !(self.confusable_gap > 0.0 && self.confusable_gap < self.mean_radius * 1.4) {
            problems.push("confusable_gap must be positive and below the axis separation".to_string());
        }
        if !(self.wild_ratio > 0.0 && self.wild_ratio < 1.0) {
            problems.push("wild_ratio must lie in (0,1)".to_string());
        }
        if (self.id_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || (self.aux_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            problems.push("split fractions must sum to 1".to_string());
        }
        if !(self.wild_fraction > 0.0 && self.wild_fraction < 1.0) {
            problems.push("wild_fraction must lie in (0,1)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid generator config: {}",
                problems.join("; ")
            )))
        }
    }
}

/// Largest-remainder apportionment of `total` into `weights.len()` buckets.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..total - assigned {
        counts[order[k % order.len()]] += 1;
    }
    counts
}

struct IdCounter(u64);

impl IdCounter {
    fn take(&mut self, n: usize) -> Vec<u64> {
        let start = self.0;
        self.0 += n as u64;
        (start..self.0).collect()
    }
}

fn gaussian_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    mean: &[f64],
    scale: f64,
) -> Vec<f64> {
    let d = mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for &m in mean {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + scale * z);
        }
    }
    data
}

/// Generate the full benchmark; fully determined by `config.seed`.
pub fn generate(config: &GenConfig) -> Result<BenchmarkData> {
    config.validate()?;
    let d = config.feature_dim;
    let c = config.classes;
    let mut ids = IdCounter(0);

    // The ID arrangement sits on a displaced center so that points between
    // class means keep the same norm as the means themselves. Classes 0 and
    // 1 form a confusable pair separated by `confusable_gap`, the way two
    // visually similar categories share most of their appearance.
    let diag: Vec<f64> = vec![1.0 / (d as f64).sqrt(); d];
    let center: Vec<f64> = diag.iter().map(|&u| u * config.center_displacement).collect();
    let class_means: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mut m = center.clone();
            if k == 1 {
                m[0] += config.mean_radius;
                m[1] += config.confusable_gap;
            } else {
                m[k] += config.mean_radius;
            }
            m
        })
        .collect();
    let class_counts = apportion(config.total_id, &config.class_proportions);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "id"));
    let mut features = Vec::with_capacity(config.total_id * d);
    let mut labels = Vec::with_capacity(config.total_id);
    for (k, &n) in class_counts.iter().enumerate() {
        features.extend(gaussian_rows(&mut rng, n, &class_means[k], config.cluster_scale));
        labels.extend(std::iter::repeat_n(k, n));
    }
    let id_all = LabeledSet {
        ids: ids.take(labels.len()),
        features: Tensor::new(vec![labels.len(), d], features)?,
        labels,
    };

    // Stratified 64/16/20, then 15% of the training pool into the wild pool.
    let mut splits = stratified_split(
        &id_all,
        &config.id_fractions,
        stream_seed(config.seed, "split"),
    )?;
    let id_test = splits.pop().unwrap();
    let id_val = splits.pop().unwrap();
    let train_pool = splits.pop().unwrap();
    let mut train_splits = stratified_split(
        &train_pool,
        &[1.0 - config.wild_fraction, config.wild_fraction],
        stream_seed(config.seed, "wild-split"),
    )?;
    let id_wild_pool = train_splits.pop().unwrap();
    let id_train = train_splits.pop().unwrap();

    // Auxiliary OOD family: broad isotropic cloud displaced from the data
    // center along the trailing axes (those not carrying any class mean),
    // disjoint by construction from every test family.
    let mut trailing = vec![0.0; d];
    for t in trailing.iter_mut().skip(c) {
        *t = 1.0 / ((d - c) as f64).sqrt();
    }
    // OOD family centers live on the same norm sphere as the class means,
    // at increasing angle from the ID arrangement: displacement along the
    // trailing axes buys angle, then the center is rescaled to the class
    // mean norm. Matched norms keep the rectifier's radial logit growth out
    // of the comparison; what remains is directional novelty.
    let mean_norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let id_norm = mean_norm(&class_means[0]);
    let off_center = |amount: f64| -> Vec<f64> {
        let raw: Vec<f64> = center
            .iter()
            .zip(&trailing)
            .map(|(&c0, &v)| c0 + amount * v)
            .collect();
        let scale = id_norm / mean_norm(&raw);
        raw.into_iter().map(|x| x * scale).collect()
    };
    let aux_mean = off_center(config.aux_displacement);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "aux"));
    let aux_features = gaussian_rows(&mut rng, config.aux_total, &aux_mean, config.aux_scale);
    let aux_ids = ids.take(config.aux_total);
    let aux_counts = apportion(config.aux_total, &config.aux_fractions);
    let mut order: Vec<usize> = (0..config.aux_total).collect();
    order.shuffle(&mut rng);
    let aux_tensor = Tensor::new(vec![config.aux_total, d], aux_features)?;
    let take_unlabeled = |idx: &[usize]| UnlabeledSet {
        ids: idx.iter().map(|&i| aux_ids[i]).collect(),
        features: gather(&aux_tensor, idx),
    };
    let aux_ood_train = take_unlabeled(&order[..aux_counts[0]]);
    let aux_ood_val = take_unlabeled(&order[aux_counts[0]..]);

    // Near OOD: between the two closest class means with matched covariance,
    // nudged slightly off the ID manifold along the trailing axes so it is
    // the innermost point of the near < aux < far distance gradient.
    let (i, j) = closest_pair(&class_means);
    let near_raw: Vec<f64> = class_means[i]
        .iter()
        .zip(&class_means[j])
        .zip(&trailing)
        .map(|((&a, &b), &v)| {
            (1.0 - config.near_factor) * a + config.near_factor * b + config.near_offset * v
        })
        .collect();
    let near_scale = id_norm / near_raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let near_mean: Vec<f64> = near_raw.into_iter().map(|x| x * near_scale).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "near"));
    let near = UnlabeledSet {
        ids: ids.take(config.near_count),
        features: Tensor::new(
            vec![config.near_count, d],
            gaussian_rows(&mut rng, config.near_count, &near_mean, config.cluster_scale),
        )?,
    };

    // Far OOD A: Gaussian displaced beyond the aux family.
    let far_mean = off_center(config.far_displacement);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "far_a"));
    let far_a = UnlabeledSet {
        ids: ids.take(config.far_count),
        features: Tensor::new(
            vec![config.far_count, d],
            gaussian_rows(&mut rng, config.far_count, &far_mean, config.far_scale),
        )?,
    };

    // Far OOD B: uniform hypercube shell — heavy-tailed and structured
    // differently from every Gaussian family.
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "far_b"));
    let mut shell = Vec::with_capacity(config.far_count * d);
    let s = config.shell_half_width;
    let shell_center = off_center(config.shell_displacement);
    for _ in 0..config.far_count {
        let row_start = shell.len();
        for &center in &shell_center {
            shell.push(center + rng.random_range(-s..s));
        }
        let pinned = rng.random_range(0..d);
        let sign = if rng.random::<bool>() { s } else { -s };
        shell[row_start + pinned] = shell_center[pinned] + sign;
    }
    let far_b = UnlabeledSet {
        ids: ids.take(config.far_count),
        features: Tensor::new(vec![config.far_count, d], shell)?,
    };

    // Wild mixture: the whole wild pool plus enough aux-train samples to hit
    // the configured ID ratio, shuffled together without labels.
    let n_wild_id = id_wild_pool.len();
    let n_wild_ood =
        ((n_wild_id as f64) * (1.0 - config.wild_ratio) / config.wild_ratio).round() as usize;
    if n_wild_ood > aux_ood_train.len() {
        return Err(Error::InvalidArgument(format!(
            "wild mixture needs {n_wild_ood} aux OOD samples but only {} exist",
            aux_ood_train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "wild"));
    let mut aux_order: Vec<usize> = (0..aux_ood_train.len()).collect();
    aux_order.shuffle(&mut rng);
    let chosen = &aux_order[..n_wild_ood];
    let mut wild_ids: Vec<u64> = id_wild_pool.ids.clone();
    wild_ids.extend(chosen.iter().map(|&i| aux_ood_train.ids[i]));
    let mut wild_rows = id_wild_pool.features.data().to_vec();
    for &i in chosen {
        wild_rows.extend_from_slice(aux_ood_train.features.row(i));
    }
    let mut row_order: Vec<usize> = (0..wild_ids.len()).collect();
    row_order.shuffle(&mut rng);
    let wild_tensor = Tensor::new(vec![wild_ids.len(), d], wild_rows)?;
    let wild_train = UnlabeledSet {
        ids: row_order.iter().map(|&i| wild_ids[i]).collect(),
        features: gather(&wild_tensor, &row_order),
    };

    let mut test_ood_sets = BTreeMap::new();
    test_ood_sets.insert("far_a".to_string(), far_a);
    test_ood_sets.insert("far_b".to_string(), far_b);
    test_ood_sets.insert("near".to_string(), near);

    Ok(BenchmarkData {
        id_train,
        id_wild_pool,
        id_val,
        id_test,
        aux_ood_train,
        aux_ood_val,
        test_ood_sets,
        wild_train,
        access: AccessLog::default(),
    })
}

fn closest_pair(means: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 1);
    let mut best_d = f64::INFINITY;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    best
}

/// Stratified split preserving per-class proportions within one sample.
///
/// Membership depends on sample identity, not input order: rows are grouped
/// per class, ordered by id, then shuffled with the seed before slicing.
/// Rejects any rounding that leaves a class empty in some split.
pub fn stratified_split(
    data: &LabeledSet,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<LabeledSet>> {
    if fractions.is_empty() || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("stratified_split data"));
    }
    let max_class = *data.labels.iter().max().unwrap();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); max_class + 1];
    for (row, &label) in data.labels.iter().enumerate() {
        per_class[label].push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "stratified"));
    let mut split_rows: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for rows in per_class.iter_mut().filter(|r| !r.is_empty()) {
        rows.sort_by_key(|&r| data.ids[r]);
        rows.shuffle(&mut rng);
        let counts = apportion(rows.len(), fractions);
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "fractions {fractions:?} leave a class with an empty split \
                 (class size {})",
                rows.len()
            )));
        }
        let mut offset = 0;
        for (s, &n) in counts.iter().enumerate() {
            split_rows[s].extend_from_slice(&rows[offset..offset + n]);
            offset += n;
        }
    }
    Ok(split_rows
        .into_iter()
        .map(|mut rows| {
            rows.sort_by_key(|&r| data.ids[r]);
            data.subset(&rows)
        })
        .collect())
}

/// Infinite sample-index stream with inverse-frequency class weighting:
/// every class is drawn uniformly often in expectation regardless of size.
#[derive(Debug, Clone)]
pub struct InverseFrequencySampler {
    per_class: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

pub fn inverse_frequency_sampler(labels: &[usize], seed: u64) -> Result<InverseFrequencySampler> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("inverse_frequency_sampler labels"));
    }
    let max_class = *labels.iter().max().unwrap();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); max_class + 1];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    if let Some(empty) = per_class.iter().position(|c| c.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no samples"
        )));
    }
    Ok(InverseFrequencySampler {
        per_class,
        rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "inv-freq")),
    })
}

impl Iterator for InverseFrequencySampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let class = self.rng.random_range(0..self.per_class.len());
        let members = &self.per_class[class];
        Some(members[self.rng.random_range(0..members.len())])
    }
}

/// Paired batch index stream: sequential batches over the longer ID side for
/// exactly ceil(len_a / batch) steps, with the OOD side cycling through its
/// positions as often as needed. Both sides of a pair have the same length.
#[derive(Debug, Clone)]
pub struct PairedBatches {
    len_a: usize,
    len_b: usize,
    batch: usize,
    step: usize,
    b_cursor: usize,
}

pub fn cycle_shorter(len_a: usize, len_b: usize, batch: usize) -> Result<PairedBatches> {
    if len_a == 0 || len_b == 0 {
        return Err(Error::EmptyInput("cycle_shorter loader"));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(PairedBatches {
        len_a,
        len_b,
        batch,
        step: 0,
        b_cursor: 0,
    })
}

impl Iterator for PairedBatches {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.step * self.batch;
        if start >= self.len_a {
            return None;
        }
        let end = (start + self.batch).min(self.len_a);
        let a: Vec<usize> = (start..end).collect();
        let b: Vec<usize> = (0..a.len())
            .map(|k| (self.b_cursor + k) % self.len_b)
            .collect();
        self.b_cursor = (self.b_cursor + a.len()) % self.len_b;
        self.step += 1;
        Some((a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn small_labeled(n_per_class: &[usize]) -> LabeledSet {
        let mut labels = Vec::new();
        for (c, &n) in n_per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(c).take(n));
        }
        let n = labels.len();
        let features: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        LabeledSet {
            ids: (0..n as u64).collect(),
            features: Tensor::new(vec![n, 2], features).unwrap(),
            labels,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let config = GenConfig {
            total_id: 300,
            near_count: 50,
            far_count: 50,
            aux_total: 200,
            ..GenConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.id_train.ids, b.id_train.ids);
        assert_eq!(a.id_train.features, b.id_train.features);
        assert_eq!(a.wild_train.ids, b.wild_train.ids);
        assert_eq!(
            a.test_ood_sets["near"].features,
            b.test_ood_sets["near"].features
        );
    }

    #[test]
    fn class_proportions_match_within_rounding() {
        let config = GenConfig::default();
        let data = generate(&config).unwrap();
        let mut counts = HashMap::new();
        for set in [&data.id_train, &data.id_wild_pool, &data.id_val, &data.id_test] {
            for &l in &set.labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
        }
        for (c, &p) in config.class_proportions.iter().enumerate() {
            let got = counts[&c] as f64;
            let expected = p * config.total_id as f64;
            assert!((got - expected).abs() <= 1.0, "class {c}: {got} vs {expected}");
        }
    }

    #[test]
    fn overall_layout_matches_table_proportions() {
        // 64/16/20 with 15% of the pool as wild gives ~54/10/16/20 overall.
        let config = GenConfig::default();
        let data = generate(&config).unwrap();
        let total = config.total_id as f64;
        assert!((data.id_train.len() as f64 / total - 0.544).abs() < 0.01);
        assert!((data.id_wild_pool.len() as f64 / total - 0.096).abs() < 0.01);
        assert!((data.id_val.len() as f64 / total - 0.16).abs() < 0.01);
        assert!((data.id_test.len() as f64 / total - 0.20).abs() < 0.01);
    }

    #[test]
    fn id_splits_are_identity_disjoint() {
        let data = generate(&GenConfig::default()).unwrap();
        let mut seen = BTreeSet::new();
        for set in [&data.id_train, &data.id_wild_pool, &data.id_val, &data.id_test] {
            for &id in &set.ids {
                assert!(seen.insert(id), "sample {id} appears in two ID splits");
            }
        }
    }

    #[test]
    fn wild_ratio_within_two_percent_and_unlabeled() {
        let config = GenConfig::default();
        let data = generate(&config).unwrap();
        let pool_ids: BTreeSet<u64> = data.id_wild_pool.ids.iter().copied().collect();
        let id_in_wild = data
            .wild_train
            .ids
            .iter()
            .filter(|id| pool_ids.contains(id))
            .count();
        let ratio = id_in_wild as f64 / data.wild_train.len() as f64;
        assert!((ratio - config.wild_ratio).abs() <= 0.02, "{ratio}");
    }

    #[test]
    fn aux_and_test_ood_identities_disjoint() {
        let data = generate(&GenConfig::default()).unwrap();
        let aux: BTreeSet<u64> = data
            .aux_ood_train
            .ids
            .iter()
            .chain(&data.aux_ood_val.ids)
            .copied()
            .collect();
        for set in data.test_ood_sets.values() {
            for id in &set.ids {
                assert!(!aux.contains(id));
            }
        }
    }

    #[test]
    fn benchmark_is_linearly_learnable() {
        // Nearest-class-mean oracle (identity-covariance LDA): fit means on
        // the training split, classify the test split.
        let data = generate(&GenConfig::default()).unwrap();
        let train = &data.id_train;
        let d = train.feature_dim();
        let classes = 5;
        let mut means = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &label) in train.labels.iter().enumerate() {
            counts[label] += 1;
            for (m, &x) in means[label].iter_mut().zip(train.features.row(row)) {
                *m += x;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= n as f64;
            }
        }
        let test = &data.id_test;
        let mut correct = 0;
        for (row, &label) in test.labels.iter().enumerate() {
            let x = test.features.row(row);
            let best = (0..classes)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&means[a]).map(|(v, m)| (v - m) * (v - m)).sum();
                    let db: f64 = x.iter().zip(&means[b]).map(|(v, m)| (v - m) * (v - m)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == label {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / test.len() as f64;
        assert!(accuracy > 0.90, "oracle accuracy {accuracy}");
    }

    #[test]
    fn degenerate_config_rejected() {
        let mut config = GenConfig::default();
        config.total_id = 0;
        assert!(generate(&config).is_err());
        let mut config = GenConfig::default();
        config.near_factor = 1.0;
        assert!(generate(&config).is_err());
        let mut config = GenConfig::default();
        config.class_proportions = vec![0.5, 0.5];
        assert!(generate(&config).is_err());
    }

    #[test]
    fn stratified_split_exact_on_round_numbers() {
        let data = small_labeled(&[100]);
        let splits = stratified_split(&data, &[0.64, 0.16, 0.20], 7).unwrap();
        assert_eq!(splits[0].len(), 64);
        assert_eq!(splits[1].len(), 16);
        assert_eq!(splits[2].len(), 20);
    }

    #[test]
    fn stratified_split_proportions_within_one_sample() {
        let data = small_labeled(&[97, 31, 8]);
        let fractions = [0.64, 0.16, 0.20];
        let splits = stratified_split(&data, &fractions, 3).unwrap();
        for (s, f) in splits.iter().zip(&fractions) {
            for c in 0..3 {
                let class_total = data.labels.iter().filter(|&&l| l == c).count() as f64;
                let got = s.labels.iter().filter(|&&l| l == c).count() as f64;
                assert!((got - f * class_total).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn stratified_split_membership_is_identity_based() {
        let data = small_labeled(&[20, 10]);
        // Permute rows but keep (id, label, features) bound together.
        let perm: Vec<usize> = (0..30).rev().collect();
        let permuted = data.subset(&perm);
        let a = stratified_split(&data, &[0.5, 0.5], 11).unwrap();
        let b = stratified_split(&permuted, &[0.5, 0.5], 11).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            let ida: BTreeSet<u64> = sa.ids.iter().copied().collect();
            let idb: BTreeSet<u64> = sb.ids.iter().copied().collect();
            assert_eq!(ida, idb);
        }
    }

    #[test]
    fn stratified_split_rejects_empty_class_split() {
        let data = small_labeled(&[3, 100]);
        // 3 samples cannot fill 4 splits.
        assert!(stratified_split(&data, &[0.25, 0.25, 0.25, 0.25], 1).is_err());
        assert!(stratified_split(&data, &[0.9, 0.2], 1).is_err());
    }

    #[test]
    fn sampler_balances_imbalanced_classes() {
        let labels: Vec<usize> = std::iter::repeat(0)
            .take(900)
            .chain(std::iter::repeat(1).take(100))
            .collect();
        let sampler = inverse_frequency_sampler(&labels, 5).unwrap();
        let draws: Vec<usize> = sampler.take(10_000).collect();
        let class1 = draws.iter().filter(|&&i| labels[i] == 1).count();
        // Binomial(10_000, 0.5): 3 sigma is 150.
        assert!((class1 as i64 - 5000).abs() < 150, "{class1}");
    }

    #[test]
    fn sampler_uniform_when_balanced() {
        let labels = vec![0, 0, 1, 1];
        let sampler = inverse_frequency_sampler(&labels, 17).unwrap();
        let mut counts = [0usize; 4];
        for i in sampler.take(40_000) {
            counts[i] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 10_000).abs() < 500, "{counts:?}");
        }
    }

    #[test]
    fn sampler_single_class_and_empty_class() {
        let sampler = inverse_frequency_sampler(&[0, 0, 0], 1).unwrap();
        assert!(sampler.take(10).all(|i| i < 3));
        assert!(inverse_frequency_sampler(&[0, 2], 1).is_err());
        assert!(inverse_frequency_sampler(&[], 1).is_err());
    }

    #[test]
    fn sampler_reproducible_per_seed() {
        let labels = vec![0, 1, 1, 0, 2, 2, 2];
        let a: Vec<usize> = inverse_frequency_sampler(&labels, 9).unwrap().take(50).collect();
        let b: Vec<usize> = inverse_frequency_sampler(&labels, 9).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn cycle_shorter_unit_batch_sequence() {
        let pairs: Vec<_> = cycle_shorter(10, 3, 1).unwrap().collect();
        assert_eq!(pairs.len(), 10);
        let b_seq: Vec<usize> = pairs.iter().map(|(_, b)| b[0]).collect();
        assert_eq!(b_seq, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn cycle_shorter_double_length_repeats_each_twice() {
        let pairs: Vec<_> = cycle_shorter(20, 10, 4).unwrap().collect();
        let mut counts = [0usize; 10];
        for (_, b) in &pairs {
            for &i in b {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 2), "{counts:?}");
    }

    #[test]
    fn cycle_shorter_equal_lengths_one_to_one() {
        let pairs: Vec<_> = cycle_shorter(6, 6, 2).unwrap().collect();
        assert_eq!(pairs.len(), 3);
        for (a, b) in pairs {
            assert_eq!(a, b);
        }
        assert!(cycle_shorter(0, 3, 1).is_err());
        assert!(cycle_shorter(3, 3, 0).is_err());
    }

    #[test]
    fn access_log_counts_reads() {
        let data = generate(&GenConfig {
            total_id: 200,
            aux_total: 150,
            near_count: 30,
            far_count: 30,
            ..GenConfig::default()
        })
        .unwrap();
        assert_eq!(data.access_log().count(Split::AuxOodTrain), 0);
        let _ = data.aux_ood_train();
        let _ = data.aux_ood_train();
        assert_eq!(data.access_log().count(Split::AuxOodTrain), 2);
        data.access_log().reset();
        assert_eq!(data.access_log().count(Split::AuxOodTrain), 0);
    }
}
