//! Known/unknown accuracies, AUROC, FPR95 and the experiment report.
//!
//! Unknown (OOD) is the positive class for AUROC and for the confusion
//! counts; higher scores mean "more OOD". FPR95 pins the sensitivity of the
//! *known* class at 95%: the threshold is the smallest score with at least
//! 95% of known samples at or below it, and FPR95 is the fraction of
//! unknown samples that also fall at or below it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results to evaluate")]
    EmptyResults,
    #[error("metric needs both known and unknown samples")]
    OneClassOnly,
    #[error("non-finite score for sample `{0}`")]
    NonFinite(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Known,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore<T> {
    pub sample_id: String,
    pub truth: Truth,
    pub decision: Truth,
    pub global_score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub oa: f64,
    pub ka: Option<f64>,
    pub ua: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Unknown decided unknown.
    pub tp: usize,
    /// Known decided unknown.
    pub fp: usize,
    /// Known decided known.
    pub tn: usize,
    /// Unknown decided known.
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn from_results<T>(results: &[LabeledScore<T>]) -> Self {
        let mut c = Counts::default();
        for r in results {
            match (r.truth, r.decision) {
                (Truth::Unknown, Truth::Unknown) => c.tp += 1,
                (Truth::Known, Truth::Unknown) => c.fp += 1,
                (Truth::Known, Truth::Known) => c.tn += 1,
                (Truth::Unknown, Truth::Known) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn accuracies<T>(results: &[LabeledScore<T>]) -> Result<Accuracies, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let c = Counts::from_results(results);
    let known = c.tn + c.fp;
    let unknown = c.tp + c.fn_;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Accuracies {
        oa: (c.tp + c.tn) as f64 / c.total() as f64,
        ka: ratio(c.tn, known),
        ua: ratio(c.tp, unknown),
    })
}

fn split_scores<T: Real>(results: &[LabeledScore<T>]) -> Result<(Vec<T>, Vec<T>), EvalError> {
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for r in results {
        if !r.global_score.is_finite() {
            return Err(EvalError::NonFinite(r.sample_id.clone()));
        }
        match r.truth {
            Truth::Known => known.push(r.global_score),
            Truth::Unknown => unknown.push(r.global_score),
        }
    }
    if known.is_empty() || unknown.is_empty() {
        return Err(EvalError::OneClassOnly);
    }
    Ok((known, unknown))
}

/// Mann-Whitney AUROC with unknown as positive; ties count one half.
pub fn auroc<T: Real>(results: &[LabeledScore<T>]) -> Result<f64, EvalError> {
    let (known, unknown) = split_scores(results)?;
    let mut all: Vec<(T, bool)> = known
        .iter()
        .map(|&s| (s, false))
        .chain(unknown.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));

    // Twice the rank sum of positives, kept integral: a tie block covering
    // 1-based ranks i+1..=j has doubled mean rank i+1+j.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let positives = all[i..j].iter().filter(|x| x.1).count() as u128;
        doubled_rank_sum += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let n_pos = unknown.len() as u128;
    let n_neg = known.len() as u128;
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn fpr95<T: Real>(results: &[LabeledScore<T>]) -> Result<f64, EvalError> {
    let (mut known, unknown) = split_scores(results)?;
    known.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let k = (95 * known.len()).div_ceil(100).max(1);
    let threshold = known[k - 1];
    let passed = unknown.iter().filter(|&&s| s <= threshold).count();
    Ok(passed as f64 / unknown.len() as f64)
}

/// Per-sample trace kept in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_id: String,
    pub label: String,
    pub truth: Truth,
    pub decision: Truth,
    pub global_score: f64,
    pub local_scores: BTreeMap<String, f64>,
    pub local_decisions: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case: String,
    pub detector: String,
    pub oa: f64,
    pub ka: Option<f64>,
    pub ua: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub counts: Counts,
    pub config: serde_json::Value,
    #[serde(default)]
    pub samples: Vec<SampleTrace>,
}

impl EvalReport {
    /// Metrics from the labeled results; AUROC/FPR95 stay `None` when one
    /// truth class is missing.
    pub fn from_results<T: Real>(
        case: impl Into<String>,
        detector: impl Into<String>,
        results: &[LabeledScore<T>],
        config: serde_json::Value,
        samples: Vec<SampleTrace>,
    ) -> Result<Self, EvalError> {
        let acc = accuracies(results)?;
        let ranked = |r: Result<f64, EvalError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(EvalError::OneClassOnly) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            case: case.into(),
            detector: detector.into(),
            oa: acc.oa,
            ka: acc.ka,
            ua: acc.ua,
            auroc: ranked(auroc(results))?,
            fpr95: ranked(fpr95(results))?,
            counts: Counts::from_results(results),
            config,
            samples,
        })
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "case      {}", self.case);
        let _ = writeln!(out, "detector  {}", self.detector);
        let _ = writeln!(out, "{:<10}{:>10}", "metric", "value");
        for (name, value) in [
            ("OA", Some(self.oa)),
            ("KA", self.ka),
            ("UA", self.ua),
            ("AUROC", self.auroc),
            ("FPR95", self.fpr95),
        ] {
            let _ = writeln!(out, "{:<10}{:>10}", name, fmt(value));
        }
        let c = &self.counts;
        let _ = writeln!(
            out,
            "counts    tp={} fp={} tn={} fn={}",
            c.tp, c.fp, c.tn, c.fn_
        );
        let _ = writeln!(
            out,
            "OA/KA/UA  {} / {} / {}",
            fmt(Some(self.oa)),
            fmt(self.ka),
            fmt(self.ua)
        );
        out
    }
}

/// Writes `<path>` (JSON) and the text table beside it with a `.txt`
/// extension.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| EvalError::IoFailure { path: p, source }
    };
    fs::write(path, report.to_json()?).map_err(io_err(path))?;
    let txt = path.with_extension("txt");
    fs::write(&txt, report.table()).map_err(io_err(&txt))?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(id: usize, truth: Truth, decision: Truth, score: f64) -> LabeledScore<f64> {
        LabeledScore {
            sample_id: format!("s{id}"),
            truth,
            decision,
            global_score: score,
        }
    }

    #[test]
    fn overall_accuracy() {
        let results: Vec<_> = (0..10)
            .map(|i| {
                let truth = if i < 5 { Truth::Known } else { Truth::Unknown };
                let decision = if i == 0 || i == 9 {
                    if truth == Truth::Known { Truth::Unknown } else { Truth::Known }
                } else {
                    truth
                };
                ls(i, truth, decision, i as f64)
            })
            .collect();
        assert_eq!(accuracies(&results).unwrap().oa, 0.8);
    }

    #[test]
    fn known_right_unknown_wrong() {
        let results: Vec<_> = (0..10)
            .map(|i| {
                let truth = if i < 5 { Truth::Known } else { Truth::Unknown };
                ls(i, truth, Truth::Known, 0.0)
            })
            .collect();
        let acc = accuracies(&results).unwrap();
        assert_eq!((acc.ka, acc.ua, acc.oa), (Some(1.0), Some(0.0), 0.5));
    }

    #[test]
    fn empty_unknown_set() {
        let results: Vec<_> = (0..4)
            .map(|i| ls(i, Truth::Known, if i == 0 { Truth::Unknown } else { Truth::Known }, 0.0))
            .collect();
        let acc = accuracies(&results).unwrap();
        assert_eq!(acc.ua, None);
        assert_eq!(Some(acc.oa), acc.ka);
        assert!(matches!(auroc(&results), Err(EvalError::OneClassOnly)));
        assert!(matches!(accuracies::<f64>(&[]), Err(EvalError::EmptyResults)));
    }

    #[test]
    fn auroc_extremes() {
        let sep: Vec<_> = (0..6)
            .map(|i| {
                let t = if i < 3 { Truth::Known } else { Truth::Unknown };
                ls(i, t, t, i as f64)
            })
            .collect();
        assert_eq!(auroc(&sep).unwrap(), 1.0);
        assert_eq!(fpr95(&sep).unwrap(), 0.0);
        let flat: Vec<_> = (0..6)
            .map(|i| {
                let t = if i < 3 { Truth::Known } else { Truth::Unknown };
                ls(i, t, t, 1.0)
            })
            .collect();
        assert_eq!(auroc(&flat).unwrap(), 0.5);
    }

    #[test]
    fn fpr95_threshold_is_nineteenth_of_twenty() {
        // Known scores 1..=20, unknown scores 18.5 and 19.5: threshold is
        // the 19th order statistic (19), so only 18.5 passes.
        let mut results: Vec<_> = (1..=20).map(|i| ls(i, Truth::Known, Truth::Known, i as f64)).collect();
        results.push(ls(21, Truth::Unknown, Truth::Unknown, 18.5));
        results.push(ls(22, Truth::Unknown, Truth::Unknown, 19.5));
        assert_eq!(fpr95(&results).unwrap(), 0.5);
    }

    #[test]
    fn report_absent_ua_is_null() {
        let results = vec![ls(0, Truth::Known, Truth::Known, 0.1), ls(1, Truth::Known, Truth::Known, 0.2)];
        let report = EvalReport::from_results("c", "d", &results, serde_json::json!({}), vec![]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert!(v["ua"].is_null());
        assert!(v["auroc"].is_null());
        assert_eq!(v["counts"]["fn"], 0);
    }
}
