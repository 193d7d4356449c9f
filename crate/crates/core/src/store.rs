//! Labeled feature datasets and their on-disk interchange format.
//!
//! A dataset is a JSON manifest plus a CSV data file living next to it:
//!
//! ```text
//! sample_id,label,split,logit_0..logit_{K-1},feat_0..feat_{D-1}
//! ```
//!
//! Logit columns are absent when the manifest's `logit_dim` is `null`.
//! Values are written in shortest round-trip decimal form so a save/load
//! cycle reproduces every `f64` bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved key used by detectors that emit one score instead of a
/// per-class map. Never a valid class name.
pub const GLOBAL_KEY: &str = "*";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("non-finite value in sample `{sample_id}` column `{column}`")]
    NonFiniteValue { sample_id: String, column: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(StoreError::SchemaViolation(format!(
                "split must be `train` or `test`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub sample_id: String,
    pub label: String,
    pub split: Split,
    pub features: Vec<f64>,
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub known_labels: Vec<String>,
    pub feature_dim: usize,
    pub logit_dim: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: String,
}

/// On-disk manifest: the in-memory manifest plus the data file location.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    class_names: Vec<String>,
    known_labels: Vec<String>,
    feature_dim: usize,
    logit_dim: Option<usize>,
    seed: Option<u64>,
    data_file: String,
    #[serde(default)]
    provenance: String,
}

/// A validated, immutable set of labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    samples: Vec<FeatureSample>,
    manifest: Manifest,
}

impl FeatureDataset {
    /// Validates every invariant and wraps the samples.
    pub fn new(manifest: Manifest, samples: Vec<FeatureSample>) -> Result<Self> {
        validate(&manifest, &samples)?;
        Ok(Self { samples, manifest })
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FeatureSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Train-split counts per label (`N_m`).
    pub fn train_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for s in self.split(Split::Train) {
            *counts.entry(s.label.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn into_parts(self) -> (Manifest, Vec<FeatureSample>) {
        (self.manifest, self.samples)
    }
}

fn schema(msg: impl Into<String>) -> StoreError {
    StoreError::SchemaViolation(msg.into())
}

fn validate(manifest: &Manifest, samples: &[FeatureSample]) -> Result<()> {
    if manifest.feature_dim < 2 {
        return Err(schema(format!(
            "feature_dim must be >= 2, got {}",
            manifest.feature_dim
        )));
    }
    let mut names = HashSet::new();
    for name in &manifest.class_names {
        if name.is_empty() || name == GLOBAL_KEY || name.contains(['\n', '\r']) {
            return Err(schema(format!("invalid class name `{name}`")));
        }
        if !names.insert(name.as_str()) {
            return Err(schema(format!("duplicate class name `{name}`")));
        }
    }
    if manifest.known_labels.is_empty() {
        return Err(schema("known_labels must be non-empty"));
    }
    let mut known = HashSet::new();
    for label in &manifest.known_labels {
        if !names.contains(label.as_str()) {
            return Err(schema(format!("known label `{label}` not in class_names")));
        }
        if !known.insert(label.as_str()) {
            return Err(schema(format!("duplicate known label `{label}`")));
        }
    }
    if manifest.logit_dim == Some(0) {
        return Err(schema("logit_dim must be positive or null"));
    }

    let mut ids = HashSet::new();
    for s in samples {
        if !ids.insert(s.sample_id.as_str()) {
            return Err(schema(format!("duplicate sample_id `{}`", s.sample_id)));
        }
        if !names.contains(s.label.as_str()) {
            return Err(schema(format!(
                "sample `{}` has unknown label `{}`",
                s.sample_id, s.label
            )));
        }
        if s.split == Split::Train && !known.contains(s.label.as_str()) {
            return Err(schema(format!(
                "train sample `{}` labeled `{}` which is not a known label",
                s.sample_id, s.label
            )));
        }
        if s.features.len() != manifest.feature_dim {
            return Err(schema(format!(
                "sample `{}` has {} features, expected {}",
                s.sample_id,
                s.features.len(),
                manifest.feature_dim
            )));
        }
        if let Some(k) = s.features.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                sample_id: s.sample_id.clone(),
                column: format!("feat_{k}"),
            });
        }
        match (&s.logits, manifest.logit_dim) {
            (None, None) => {}
            (Some(l), Some(k)) if l.len() == k => {
                if let Some(i) = l.iter().position(|v| !v.is_finite()) {
                    return Err(StoreError::NonFiniteValue {
                        sample_id: s.sample_id.clone(),
                        column: format!("logit_{i}"),
                    });
                }
            }
            (Some(l), Some(k)) => {
                return Err(schema(format!(
                    "sample `{}` has {} logits, expected {k}",
                    s.sample_id,
                    l.len()
                )))
            }
            (Some(_), None) => {
                return Err(schema(format!(
                    "sample `{}` carries logits but logit_dim is null",
                    s.sample_id
                )))
            }
            (None, Some(_)) => {
                return Err(schema(format!("sample `{}` is missing logits", s.sample_id)))
            }
        }
    }
    Ok(())
}

fn header(manifest: &Manifest) -> Vec<String> {
    let mut cols = vec!["sample_id".to_string(), "label".into(), "split".into()];
    if let Some(k) = manifest.logit_dim {
        cols.extend((0..k).map(|i| format!("logit_{i}")));
    }
    cols.extend((0..manifest.feature_dim).map(|i| format!("feat_{i}")));
    cols
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, err: csv::Error) -> StoreError {
    if err.is_io_error() {
        match err.into_kind() {
            csv::ErrorKind::Io(source) => StoreError::IoFailure {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!(),
        }
    } else {
        StoreError::Csv(err)
    }
}

/// Reads a manifest and its data file, validating every invariant.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(StoreError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: ManifestFile = serde_json::from_str(&text)?;
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.data_file);
    if !data_path.is_file() {
        return Err(StoreError::MissingFile(data_path));
    }
    let manifest = Manifest {
        class_names: file.class_names,
        known_labels: file.known_labels,
        feature_dim: file.feature_dim,
        logit_dim: file.logit_dim,
        seed: file.seed,
        provenance: file.provenance,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(&data_path)
        .map_err(|e| csv_err(&data_path, e))?;
    let expected = header(&manifest);
    let got: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(&data_path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != expected {
        return Err(schema(format!(
            "data header mismatch: expected {} columns starting `{}`, got {} columns",
            expected.len(),
            expected[..3].join(","),
            got.len()
        )));
    }

    let k = manifest.logit_dim.unwrap_or(0);
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(&data_path, e))?;
        let sample_id = record.get(0).unwrap_or_default().to_string();
        if record.len() != expected.len() {
            return Err(schema(format!(
                "row `{sample_id}` has {} columns, expected {}",
                record.len(),
                expected.len()
            )));
        }
        let parse = |idx: usize| -> Result<f64> {
            let raw = &record[idx];
            let v: f64 = raw.trim().parse().map_err(|_| {
                schema(format!(
                    "row `{sample_id}` column `{}`: `{raw}` is not a number",
                    expected[idx]
                ))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(StoreError::NonFiniteValue {
                    sample_id: sample_id.clone(),
                    column: expected[idx].clone(),
                })
            }
        };
        let logits = match manifest.logit_dim {
            Some(_) => Some((3..3 + k).map(&parse).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let features = (3 + k..expected.len())
            .map(&parse)
            .collect::<Result<Vec<_>>>()?;
        samples.push(FeatureSample {
            sample_id: sample_id.clone(),
            label: record[1].to_string(),
            split: record[2].parse()?,
            features,
            logits,
        });
    }
    FeatureDataset::new(manifest, samples)
}

/// Writes `<path>` (manifest JSON) and `<path stem>.csv` beside it.
pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| schema(format!("manifest path `{}` has no file stem", path.display())))?;
    let data_file = format!("{stem}.csv");
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);

    let m = &ds.manifest;
    let file = ManifestFile {
        class_names: m.class_names.clone(),
        known_labels: m.known_labels.clone(),
        feature_dim: m.feature_dim,
        logit_dim: m.logit_dim,
        seed: m.seed,
        data_file,
        provenance: m.provenance.clone(),
    };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    fs::write(path, json).map_err(io_err(path))?;

    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&data_path)
        .map_err(|e| csv_err(&data_path, e))?;
    writer
        .write_record(header(m))
        .map_err(|e| csv_err(&data_path, e))?;
    let mut row: Vec<String> = Vec::new();
    for s in &ds.samples {
        row.clear();
        row.push(s.sample_id.clone());
        row.push(s.label.clone());
        row.push(s.split.as_str().to_string());
        if let Some(logits) = &s.logits {
            row.extend(logits.iter().map(|v| format!("{v:?}")));
        }
        row.extend(s.features.iter().map(|v| format!("{v:?}")));
        writer.write_record(&row).map_err(|e| csv_err(&data_path, e))?;
    }
    writer.flush().map_err(io_err(&data_path))?;
    Ok(())
}
