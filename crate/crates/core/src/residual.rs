//! Standardized feature vectors and the class-localized residuals built
//! from them.
//!
//! Every feature vector is standardized across its own components
//! (population mean 0, population variance 1). Residuals are element-wise
//! differences of two standardized vectors:
//!
//! * in-class: both train, same label;
//! * inter-class: both train, different labels;
//! * test-train: a test vector minus a train vector of some known class.
//!
//! Train pairs are unordered combinations; the left side is always the
//! lexicographically smaller `sample_id`. Subsampling is seeded per
//! stratum (or per query sample) and never depends on input order.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Real;
use crate::store::Split;

/// Variance floor below which a feature vector counts as constant.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ResidualError {
    #[error("degenerate feature vector (population variance {variance:e})")]
    DegenerateVector { variance: f64 },
    #[error("vector needs at least 2 components, got {0}")]
    TooShort(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("class `{class}` has {have} train vectors, need at least {need}")]
    TooFewSamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("class `{0}` has no train vectors")]
    EmptyClass(String),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
}

pub type Result<T, E = ResidualError> = std::result::Result<T, E>;

/// Standardizes `features` to population mean 0 and variance 1.
pub fn standardize<T: Real>(features: &[T]) -> Result<Vec<T>> {
    if features.len() < 2 {
        return Err(ResidualError::TooShort(features.len()));
    }
    let n = T::of_usize(features.len());
    let mu = features.iter().copied().sum::<T>() / n;
    let var = features
        .iter()
        .map(|&x| (x - mu) * (x - mu))
        .sum::<T>()
        / n;
    if !(var.as_f64() >= DEGENERATE_VARIANCE) {
        return Err(ResidualError::DegenerateVector {
            variance: var.as_f64(),
        });
    }
    let sd = var.sqrt();
    Ok(features.iter().map(|&x| (x - mu) / sd).collect())
}

/// A standardized penultimate feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Spfv<T> {
    pub values: Vec<T>,
    pub source_id: String,
    pub label: String,
    pub split: Split,
}

impl<T: Real> Spfv<T> {
    pub fn from_features(
        features: &[T],
        source_id: impl Into<String>,
        label: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        Ok(Self {
            values: standardize(features)?,
            source_id: source_id.into(),
            label: label.into(),
            split,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Standardizes a batch, dropping constant vectors with a warning.
pub fn standardize_all<'a, T, I>(items: I) -> Vec<Spfv<T>>
where
    T: Real,
    I: IntoIterator<Item = (&'a [T], &'a str, &'a str, Split)>,
{
    items
        .into_iter()
        .filter_map(|(features, id, label, split)| {
            match Spfv::from_features(features, id, label, split) {
                Ok(v) => Some(v),
                Err(err) => {
                    log::warn!("dropping sample `{id}`: {err}");
                    None
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    InClass,
    InterClass,
    TestTrain,
}

impl ResidualKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualKind::InClass => "in_class",
            ResidualKind::InterClass => "inter_class",
            ResidualKind::TestTrain => "test_train",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector<T> {
    pub values: Vec<T>,
    pub left_id: String,
    pub right_id: String,
    pub left_label: String,
    pub right_label: String,
    pub kind: ResidualKind,
}

pub(crate) fn difference<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// `a - b`, element-wise, with its kind derived from labels and splits.
pub fn make_residual<T: Real>(a: &Spfv<T>, b: &Spfv<T>) -> Result<ResidualVector<T>> {
    if a.dim() != b.dim() {
        return Err(ResidualError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let kind = match (a.split, b.split) {
        (Split::Train, Split::Train) if a.label == b.label => ResidualKind::InClass,
        (Split::Train, Split::Train) => ResidualKind::InterClass,
        _ => ResidualKind::TestTrain,
    };
    Ok(ResidualVector {
        values: difference(&a.values, &b.values),
        left_id: a.source_id.clone(),
        right_id: b.source_id.clone(),
        left_label: a.label.clone(),
        right_label: b.label.clone(),
        kind,
    })
}

/// How many items of a stratum to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAmount {
    /// Fraction in (0, 1], rounded to nearest, never below one item.
    Rate(f64),
    /// Fixed count per stratum, capped at the stratum size unless sampling
    /// with replacement.
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    #[serde(flatten)]
    pub amount: SampleAmount,
    pub seed: u64,
    #[serde(default)]
    pub with_replacement: bool,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self::full()
    }
}

impl SamplingPolicy {
    /// Rate 1, no subsampling.
    pub fn full() -> Self {
        Self {
            amount: SampleAmount::Rate(1.0),
            seed: 0,
            with_replacement: false,
        }
    }

    pub fn rate(rate: f64, seed: u64) -> Self {
        Self {
            amount: SampleAmount::Rate(rate),
            seed,
            with_replacement: false,
        }
    }

    pub fn count(count: usize, seed: u64) -> Self {
        Self {
            amount: SampleAmount::Count(count),
            seed,
            with_replacement: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.amount {
            SampleAmount::Rate(r) if r > 0.0 && r <= 1.0 => Ok(()),
            SampleAmount::Rate(r) => Err(ResidualError::InvalidPolicy(format!(
                "rate must be in (0, 1], got {r}"
            ))),
            SampleAmount::Count(0) => {
                Err(ResidualError::InvalidPolicy("count must be positive".into()))
            }
            SampleAmount::Count(_) => Ok(()),
        }
    }

    /// Number of items kept out of a stratum of `n`.
    pub fn take(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        match self.amount {
            SampleAmount::Rate(r) => ((r * n as f64).round() as usize).clamp(1, n),
            SampleAmount::Count(c) if self.with_replacement => c,
            SampleAmount::Count(c) => c.min(n),
        }
    }

    pub fn is_exhaustive(&self) -> bool {
        matches!(self.amount, SampleAmount::Rate(r) if r >= 1.0) && !self.with_replacement
    }

    /// Sorted indices into a stratum of `n`, seeded by `(seed, key)`.
    pub fn select(&self, n: usize, key: &str) -> Vec<usize> {
        let k = self.take(n);
        if k == n && !self.with_replacement {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, key));
        let mut picked: Vec<usize> = if self.with_replacement {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        } else {
            index::sample(&mut rng, n, k).into_vec()
        };
        picked.sort_unstable();
        picked
    }
}

/// Stable 64-bit seed for a named stratum.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Count of in-class pairs: Σ N_m (N_m - 1) / 2.
pub fn in_class_pair_count(class_sizes: &[usize]) -> usize {
    class_sizes.iter().map(|&n| n * n.saturating_sub(1) / 2).sum()
}

/// Count of inter-class pairs: Σ_{m<n} N_m N_n.
pub fn inter_class_pair_count(class_sizes: &[usize]) -> usize {
    let mut total = 0;
    for (i, &a) in class_sizes.iter().enumerate() {
        for &b in &class_sizes[i + 1..] {
            total += a * b;
        }
    }
    total
}

/// Count of all unordered pairs: N_t (N_t - 1) / 2.
pub fn total_pair_count(class_sizes: &[usize]) -> usize {
    let n: usize = class_sizes.iter().sum();
    n * n.saturating_sub(1) / 2
}

/// Count of test residuals: M × Σ N_m.
pub fn test_residual_count(test_samples: usize, class_sizes: &[usize]) -> usize {
    test_samples * class_sizes.iter().sum::<usize>()
}

/// Train vectors grouped by class, each group sorted by `source_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReferences<T> {
    classes: BTreeMap<String, Vec<Spfv<T>>>,
}

impl<T: Real> ClassReferences<T> {
    pub fn new(vectors: impl IntoIterator<Item = Spfv<T>>) -> Self {
        let mut classes: BTreeMap<String, Vec<Spfv<T>>> = BTreeMap::new();
        for v in vectors {
            classes.entry(v.label.clone()).or_default().push(v);
        }
        for group in classes.values_mut() {
            group.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        }
        Self { classes }
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, &[Spfv<T>])> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn class(&self, label: &str) -> Option<&[Spfv<T>]> {
        self.classes.get(label).map(Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.classes.values().map(Vec::len).collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.classes.values().flatten().next().map(Spfv::dim)
    }

    /// Sampled references of `label` for the query `query_id`. With
    /// `exclude_self`, the query itself is removed from the candidates
    /// (used when scoring train vectors against their own class).
    pub fn sample_for(
        &self,
        query_id: &str,
        label: &str,
        policy: &SamplingPolicy,
        exclude_self: bool,
    ) -> Vec<&Spfv<T>> {
        let Some(group) = self.classes.get(label) else {
            return Vec::new();
        };
        let candidates: Vec<&Spfv<T>> = group
            .iter()
            .filter(|v| !(exclude_self && v.source_id == query_id))
            .collect();
        let key = format!("query:{query_id}:{label}");
        policy
            .select(candidates.len(), &key)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    }
}

fn canonical<'a, T>(a: &'a Spfv<T>, b: &'a Spfv<T>) -> (&'a Spfv<T>, &'a Spfv<T>) {
    if a.source_id <= b.source_id {
        (a, b)
    } else {
        (b, a)
    }
}

/// All (or a seeded subsample of) unordered train pairs.
///
/// Strata are the in-class pairs of each class and the inter-class pairs of
/// each class pair; each stratum is enumerated in canonical order, then
/// subsampled independently.
pub fn generate_train_residuals<T: Real>(
    train: &[Spfv<T>],
    policy: &SamplingPolicy,
) -> Result<Vec<ResidualVector<T>>> {
    policy.validate()?;
    let refs = ClassReferences::new(train.iter().cloned());
    if let Some(d) = refs.dim() {
        if let Some(bad) = train.iter().find(|v| v.dim() != d) {
            return Err(ResidualError::DimensionMismatch {
                left: d,
                right: bad.dim(),
            });
        }
    }
    for (label, group) in refs.classes() {
        if group.len() < 2 {
            return Err(ResidualError::TooFewSamples {
                class: label.to_string(),
                have: group.len(),
                need: 2,
            });
        }
    }

    let groups: Vec<(&str, &[Spfv<T>])> = refs.classes().collect();
    let mut out = Vec::new();
    for (gi, &(label_m, group_m)) in groups.iter().enumerate() {
        for &(label_n, group_n) in &groups[gi..] {
            let mut pairs: Vec<(&Spfv<T>, &Spfv<T>)> = Vec::new();
            if label_m == label_n {
                for (i, a) in group_m.iter().enumerate() {
                    for b in &group_m[i + 1..] {
                        pairs.push(canonical(a, b));
                    }
                }
            } else {
                for a in group_m {
                    for b in group_n {
                        pairs.push(canonical(a, b));
                    }
                }
            }
            pairs.sort_by(|x, y| {
                (x.0.source_id.as_str(), x.1.source_id.as_str())
                    .cmp(&(y.0.source_id.as_str(), y.1.source_id.as_str()))
            });
            let key = format!("train:{label_m}|{label_n}");
            for i in policy.select(pairs.len(), &key) {
                let (a, b) = pairs[i];
                out.push(make_residual(a, b)?);
            }
        }
    }
    Ok(out)
}

/// Residuals `test - train` for every known class.
pub fn generate_test_residuals<T: Real>(
    test_vec: &Spfv<T>,
    train_by_class: &ClassReferences<T>,
    policy: &SamplingPolicy,
) -> Result<BTreeMap<String, Vec<ResidualVector<T>>>> {
    policy.validate()?;
    let mut out = BTreeMap::new();
    for (label, group) in train_by_class.classes() {
        if group.is_empty() {
            return Err(ResidualError::EmptyClass(label.to_string()));
        }
        let picked = train_by_class.sample_for(&test_vec.source_id, label, policy, false);
        let residuals = picked
            .into_iter()
            .map(|train| make_residual(test_vec, train))
            .collect::<Result<Vec<_>>>()?;
        out.insert(label.to_string(), residuals);
    }
    Ok(out)
}

/// Writes `left_id,right_id,kind,val_0..val_{D-1}` rows.
pub fn write_residual_csv<T: Real, W: Write>(
    residuals: &[ResidualVector<T>],
    dim: usize,
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut head = vec!["left_id".to_string(), "right_id".into(), "kind".into()];
    head.extend((0..dim).map(|i| format!("val_{i}")));
    w.write_record(&head)?;
    for r in residuals {
        let mut row = vec![r.left_id.clone(), r.right_id.clone(), r.kind.as_str().to_string()];
        row.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
