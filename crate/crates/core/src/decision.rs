//! From per-class local scores to OOD decisions.
//!
//! * Voting: each class `i` flags the sample when `s_i > Th_i`; the sample
//!   is OOD only when every class flags it.
//! * Probability: each class maps `s_i` through the KDE-estimated CDF of its
//!   ID score distribution, `p_i = exp(-β (1 - CDF_i(s_i)))`, and the global
//!   OOD probability is `Π p_i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kde::{KdeError, KdeModel};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("class `{0}` has no ID scores")]
    EmptyScores(String),
    #[error("percentile must be in [0, 100], got {0}")]
    BadPercentile(f64),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("no score for class `{0}`")]
    MissingClassScore(String),
    #[error("density fit for class `{class}`: {source}")]
    Kde {
        class: String,
        #[source]
        source: KdeError,
    },
}

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted values.
pub fn percentile<T: Real>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::lit(rank - lo as f64);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds<T> {
    pub per_class: BTreeMap<String, T>,
    pub percentile: f64,
}

pub fn fit_thresholds<T: Real>(
    id_scores: &BTreeMap<String, Vec<T>>,
    pct: f64,
) -> Result<ClassThresholds<T>, DecisionError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(DecisionError::BadPercentile(pct));
    }
    let per_class = id_scores
        .iter()
        .map(|(class, scores)| {
            percentile(scores, pct)
                .map(|th| (class.clone(), th))
                .ok_or_else(|| DecisionError::EmptyScores(class.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(ClassThresholds {
        per_class,
        percentile: pct,
    })
}

/// `true` (OOD) iff `score > threshold`; a tie is ID.
pub fn local_decision<T: Real>(score: T, threshold: T) -> bool {
    score > threshold
}

/// OOD only when every local decision is OOD (the product of the 0/1
/// local decisions).
pub fn global_decision(locals: impl IntoIterator<Item = bool>) -> bool {
    locals.into_iter().all(|d| d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbForm {
    /// `exp(-β (1 - CDF))`, in (0, 1].
    #[default]
    BoundedExp,
    /// `1 / exp(-β (1 - CDF))`, the literal reciprocal; values >= 1.
    AsWritten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub prob_form: ProbForm,
}

fn default_beta() -> f64 {
    120.0
}

fn default_percentile() -> f64 {
    100.0
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            percentile: default_percentile(),
            prob_form: ProbForm::default(),
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(DecisionError::BadBeta(self.beta));
        }
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(DecisionError::BadPercentile(self.percentile));
        }
        Ok(())
    }
}

/// Exponent `∓β (1 - CDF(s))` in log space.
pub fn local_ood_log_prob<T: Real>(kde: &KdeModel<T>, score: T, beta: T, form: ProbForm) -> T {
    let tail = T::one() - kde.cdf(score);
    match form {
        ProbForm::BoundedExp => -beta * tail,
        ProbForm::AsWritten => beta * tail,
    }
}

pub fn local_ood_prob<T: Real>(kde: &KdeModel<T>, score: T, beta: T, form: ProbForm) -> T {
    local_ood_log_prob(kde, score, beta, form).exp()
}

pub fn global_ood_prob<T: Real>(locals: impl IntoIterator<Item = T>) -> T {
    locals.into_iter().fold(T::one(), |acc, p| acc * p)
}

/// Everything decided about one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision<T> {
    pub local: BTreeMap<String, bool>,
    pub is_ood: bool,
    pub local_log_probs: BTreeMap<String, T>,
    /// `Σ ln p_i`; never underflows, ranks identically to the product.
    pub global_log_prob: T,
    pub global_prob: T,
}

/// Per-class thresholds and KDEs fitted from ID score distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionModel<T> {
    pub thresholds: ClassThresholds<T>,
    pub kdes: BTreeMap<String, KdeModel<T>>,
    pub config: DecisionConfig,
}

impl<T: Real> DecisionModel<T> {
    pub fn fit(
        id_scores: &BTreeMap<String, Vec<T>>,
        config: DecisionConfig,
    ) -> Result<Self, DecisionError> {
        config.validate()?;
        let thresholds = fit_thresholds(id_scores, config.percentile)?;
        let kdes = id_scores
            .iter()
            .map(|(class, pts)| {
                KdeModel::fit(pts)
                    .map(|k| (class.clone(), k))
                    .map_err(|source| DecisionError::Kde {
                        class: class.clone(),
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            thresholds,
            kdes,
            config,
        })
    }

    pub fn decide(&self, scores: &BTreeMap<String, T>) -> Result<Decision<T>, DecisionError> {
        let beta = T::lit(self.config.beta);
        let mut local = BTreeMap::new();
        let mut local_log_probs = BTreeMap::new();
        for (class, &th) in &self.thresholds.per_class {
            let &s = scores
                .get(class)
                .ok_or_else(|| DecisionError::MissingClassScore(class.clone()))?;
            local.insert(class.clone(), local_decision(s, th));
            let kde = &self.kdes[class];
            local_log_probs.insert(
                class.clone(),
                local_ood_log_prob(kde, s, beta, self.config.prob_form),
            );
        }
        let global_log_prob: T = local_log_probs.values().copied().sum();
        Ok(Decision {
            is_ood: global_decision(local.values().copied()),
            local,
            local_log_probs,
            global_prob: global_log_prob.exp(),
            global_log_prob,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn thresholds_by_percentile() {
        let t = fit_thresholds(&scores(&[("A", &[1.0, 2.0, 3.0])]), 100.0).unwrap();
        assert_eq!(t.per_class["A"], 3.0);
        let t = fit_thresholds(&scores(&[("A", &[4.0, 1.0, 3.0, 2.0])]), 50.0).unwrap();
        assert_eq!(t.per_class["A"], 2.5);
        let t = fit_thresholds(&scores(&[("A", &[4.0, 1.0, 3.0])]), 0.0).unwrap();
        assert_eq!(t.per_class["A"], 1.0);
        assert_eq!(
            fit_thresholds(&scores(&[("B", &[])]), 100.0).unwrap_err(),
            DecisionError::EmptyScores("B".into())
        );
    }

    #[test]
    fn local_decision_ties_are_id() {
        assert!(!local_decision(2.0_f64, 2.0));
        assert!(local_decision(2.0_f64 + 1e-12, 2.0));
        assert!(!local_decision(-1e300_f64, 2.0));
    }

    #[test]
    fn global_decision_is_product() {
        assert!(global_decision([true, true]));
        assert!(!global_decision([true, false, true]));
    }

    #[test]
    fn probabilities() {
        let kde = KdeModel::with_bandwidth(&[0.0_f64, 1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        assert_eq!(local_ood_prob(&kde, 100.0, 120.0, ProbForm::BoundedExp), 1.0);
        let low = local_ood_prob(&kde, -100.0, 120.0, ProbForm::BoundedExp);
        assert!((low - (-120.0_f64).exp()).abs() < 1e-60);
        assert!(local_ood_prob(&kde, 1.5, 120.0, ProbForm::AsWritten) >= 1.0);
        assert_eq!(global_ood_prob([0.5_f64, 0.5]), 0.25);
        assert_eq!(global_ood_prob([1.0_f64, 1.0, 1.0]), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = DecisionConfig::default();
        assert_eq!(c.beta, 120.0);
        assert_eq!(c.percentile, 100.0);
        c.beta = 0.0;
        assert!(c.validate().is_err());
    }
}
