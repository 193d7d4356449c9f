//! End-to-end runs: cases × detectors over one dataset, one report each.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::decision::{DecisionConfig, DecisionError, DecisionModel};
use crate::detectors::{DetectorError, DetectorSpec, FittedDetector, Observation};
use crate::eval::{emit_report, EvalError, EvalReport, LabeledScore, SampleTrace, Truth};
use crate::residual::{
    generate_train_residuals, standardize_all, write_residual_csv, ResidualError, SamplingPolicy,
};
use crate::store::{load_dataset, FeatureDataset, FeatureSample, Split, StoreError};
use crate::synth::{synthesize, SynthError, SynthSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("case `{case}`: class `{class}` keeps {have} of its train samples, need at least 2")]
    TooFewSamples {
        case: String,
        class: String,
        have: usize,
    },
    #[error("case `{case}`, detector `{detector}`: {source}")]
    Detector {
        case: String,
        detector: String,
        #[source]
        source: DetectorError,
    },
    #[error("case `{case}`, detector `{detector}`: {source}")]
    Decision {
        case: String,
        detector: String,
        #[source]
        source: DecisionError,
    },
    #[error("case `{case}`, detector `{detector}`: {source}")]
    Eval {
        case: String,
        detector: String,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error("writing residuals: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Problems with the configuration itself rather than with running it.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_) | ExperimentError::UnknownClass(_) | ExperimentError::Parse(_)
        )
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Manifest JSON of a stored feature dataset.
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub known_labels: Vec<String>,
    #[serde(default = "full_fraction")]
    pub train_fraction: f64,
}

fn full_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub cases: Vec<CaseConfig>,
    pub detectors: Vec<DetectorSpec>,
    #[serde(default)]
    pub decision: DecisionConfig,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    pub output_dir: PathBuf,
    /// Seed of the per-class train subsampling.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Replaces every seed (subsampling, residual sampling, synthesis).
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sampling.seed = seed;
        if let DatasetSource::Synth(s) = &mut self.dataset {
            s.seed = seed;
        }
    }

    pub fn case_name(&self, index: usize) -> String {
        self.cases[index]
            .name
            .clone()
            .unwrap_or_else(|| format!("case{index}"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.cases.is_empty() {
            return bad("at least one case is required".into());
        }
        if self.detectors.is_empty() {
            return bad("at least one detector is required".into());
        }
        let mut names = BTreeSet::new();
        for (i, case) in self.cases.iter().enumerate() {
            let name = self.case_name(i);
            if !(case.train_fraction > 0.0 && case.train_fraction <= 1.0) {
                return bad(format!(
                    "case `{name}`: train_fraction must be in (0, 1], got {}",
                    case.train_fraction
                ));
            }
            if case.known_labels.is_empty() {
                return bad(format!("case `{name}`: known_labels is empty"));
            }
            if name.is_empty() || name.contains(['/', '\\']) || !names.insert(name.clone()) {
                return bad(format!("case name `{name}` is empty, repeated or not a file name"));
            }
        }
        for spec in &self.detectors {
            spec.validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.decision
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.sampling
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<FeatureDataset> {
        match &self.dataset {
            DatasetSource::Path(p) => Ok(load_dataset(p)?),
            DatasetSource::Synth(spec) => Ok(synthesize(spec)?),
        }
    }
}

/// `⌈fraction · n⌉`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Per-class seeded train subsample of one case, ordered by sample id.
pub fn case_train<'a>(
    ds: &'a FeatureDataset,
    case: &CaseConfig,
    case_name: &str,
    seed: u64,
) -> Result<Vec<&'a FeatureSample>> {
    let mut out = Vec::new();
    for label in &case.known_labels {
        let mut members: Vec<&FeatureSample> = ds
            .split(Split::Train)
            .filter(|s| &s.label == label)
            .collect();
        members.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let take = fraction_count(case.train_fraction, members.len());
        if take < 2 {
            return Err(ExperimentError::TooFewSamples {
                case: case_name.to_string(),
                class: label.clone(),
                have: take,
            });
        }
        let key = format!("fraction:{case_name}:{label}");
        let picked = SamplingPolicy::count(take, seed).select(members.len(), &key);
        out.extend(picked.into_iter().map(|i| members[i]));
    }
    Ok(out)
}

/// Observation whose logits are restricted to the case's known classes
/// (dropped when one of them has no logit column).
fn observation(sample: &FeatureSample, logit_columns: Option<&[usize]>) -> Observation<f64> {
    let mut obs = Observation::from_sample(sample);
    obs.logits = match (obs.logits.take(), logit_columns) {
        (Some(l), Some(cols)) => Some(cols.iter().map(|&c| l[c]).collect()),
        _ => None,
    };
    obs
}

fn check_case_labels(ds: &FeatureDataset, case: &CaseConfig) -> Result<()> {
    let names = &ds.manifest().class_names;
    for label in &case.known_labels {
        if !names.contains(label) {
            return Err(ExperimentError::UnknownClass(label.clone()));
        }
    }
    Ok(())
}

/// Fits, scores, decides and evaluates one detector on one case without
/// touching the filesystem.
pub fn evaluate_case(
    ds: &FeatureDataset,
    case: &CaseConfig,
    case_name: &str,
    spec: DetectorSpec,
    decision: DecisionConfig,
    sampling: &SamplingPolicy,
    seed: u64,
) -> Result<EvalReport> {
    check_case_labels(ds, case)?;
    let detector = spec.key();
    let ctx_det = |source| ExperimentError::Detector {
        case: case_name.to_string(),
        detector: detector.clone(),
        source,
    };
    let ctx_dec = |source| ExperimentError::Decision {
        case: case_name.to_string(),
        detector: detector.clone(),
        source,
    };

    let manifest_known = &ds.manifest().known_labels;
    let logit_columns: Option<Vec<usize>> = ds.manifest().logit_dim.and_then(|_| {
        case.known_labels
            .iter()
            .map(|l| manifest_known.iter().position(|k| k == l))
            .collect()
    });
    let cols = logit_columns.as_deref();

    let train: Vec<Observation<f64>> = case_train(ds, case, case_name, seed)?
        .into_iter()
        .map(|s| observation(s, cols))
        .collect();
    let fitted = FittedDetector::fit(spec, &train, sampling).map_err(ctx_det)?;
    let model = DecisionModel::fit(fitted.id_score_samples(), decision).map_err(ctx_dec)?;

    let known: BTreeSet<&str> = case.known_labels.iter().map(String::as_str).collect();
    let mut results = Vec::new();
    let mut traces = Vec::new();
    for sample in ds.split(Split::Test) {
        let obs = observation(sample, cols);
        let scores = fitted.score(&obs).map_err(ctx_det)?;
        let d = model.decide(&scores.per_class).map_err(ctx_dec)?;
        let truth = if known.contains(sample.label.as_str()) {
            Truth::Known
        } else {
            Truth::Unknown
        };
        let decision = if d.is_ood { Truth::Unknown } else { Truth::Known };
        results.push(LabeledScore {
            sample_id: sample.sample_id.clone(),
            truth,
            decision,
            global_score: d.global_log_prob,
        });
        traces.push(SampleTrace {
            sample_id: sample.sample_id.clone(),
            label: sample.label.clone(),
            truth,
            decision,
            global_score: d.global_log_prob,
            local_scores: scores.per_class,
            local_decisions: d.local,
        });
    }

    let config = json!({
        "case": {
            "name": case_name,
            "known_labels": case.known_labels,
            "train_fraction": case.train_fraction,
            "train_counts": count_labels(&train),
        },
        "detector": spec,
        "decision": decision,
        "sampling": sampling,
        "seed": seed,
        "thresholds": model.thresholds.per_class,
    });
    EvalReport::from_results(case_name, detector.clone(), &results, config, traces).map_err(
        |source| ExperimentError::Eval {
            case: case_name.to_string(),
            detector: detector.clone(),
            source,
        },
    )
}

fn count_labels(obs: &[Observation<f64>]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for o in obs {
        *counts.entry(o.label.as_str()).or_insert(0) += 1;
    }
    counts
}

/// `<case>__<family>-<base>-<aggregation>.json`.
pub fn report_file_name(case_name: &str, spec: &DetectorSpec) -> String {
    format!("{case_name}__{}.json", spec.key().replace(':', "-"))
}

/// Runs every case × detector, writing one JSON report (plus a text table)
/// per pair into `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    for case in &cfg.cases {
        check_case_labels(&ds, case)?;
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|source| ExperimentError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let mut reports = Vec::new();
    for (i, case) in cfg.cases.iter().enumerate() {
        let name = cfg.case_name(i);
        for &spec in &cfg.detectors {
            let report = evaluate_case(&ds, case, &name, spec, cfg.decision, &cfg.sampling, cfg.seed)?;
            let path = cfg.output_dir.join(report_file_name(&name, &spec));
            emit_report(&report, &path).map_err(|source| ExperimentError::Eval {
                case: name.clone(),
                detector: spec.key(),
                source,
            })?;
            log::info!(
                "{name} {}: oa {:.4} auroc {}",
                spec.key(),
                report.oa,
                report.auroc.map_or("-".into(), |a| format!("{a:.4}"))
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Writes the train residuals of the selected classes (all manifest known
/// classes when `class_filter` is empty) as CSV; returns the row count.
pub fn dump_residuals(
    cfg: &ExperimentConfig,
    class_filter: &[String],
    out: impl AsRef<Path>,
) -> Result<usize> {
    cfg.sampling
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let ds = cfg.load_dataset()?;
    let classes: Vec<String> = if class_filter.is_empty() {
        ds.manifest().known_labels.clone()
    } else {
        for c in class_filter {
            if !ds.manifest().known_labels.contains(c) {
                return Err(ExperimentError::UnknownClass(c.clone()));
            }
        }
        class_filter.to_vec()
    };
    let spfvs = standardize_all(
        ds.split(Split::Train)
            .filter(|s| classes.contains(&s.label))
            .map(|s| {
                (
                    s.features.as_slice(),
                    s.sample_id.as_str(),
                    s.label.as_str(),
                    Split::Train,
                )
            }),
    );
    let residuals = generate_train_residuals(&spfvs, &cfg.sampling)?;
    let out = out.as_ref();
    let file = fs::File::create(out).map_err(|source| ExperimentError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_residual_csv(&residuals, ds.feature_dim(), std::io::BufWriter::new(file))?;
    Ok(residuals.len())
}
