//! The six detector families behind one fit/score interface.
//!
//! Every score is oriented so that higher means more OOD. Per-class
//! families return one score per known class; MSP and feature-base ViM
//! return a single score under [`GLOBAL_KEY`].
//!
//! ID score samples (the per-class distributions that feed thresholds and
//! KDEs) are computed leave-one-out: each train sample is scored against a
//! model that has not seen it, so they are comparable with test scores.

pub mod knn;
pub mod mahalanobis;
pub mod msp;
pub mod openmax;
mod spec;
pub mod stat;
pub mod vim;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

pub use spec::{Aggregation, Base, DetectorParams, DetectorSpec, Family, KnnMetric};

use crate::linalg::SquareMatrix;
use crate::residual::{
    difference, standardize_all, ClassReferences, ResidualError, SamplingPolicy, Spfv,
};
use crate::scalar::{cast_slice, dot, Real};
use crate::store::{FeatureSample, Split, GLOBAL_KEY};
use crate::weibull::{WeibullError, WeibullModel};

use knn::KnnIndex;
use mahalanobis::{Covariance, GaussianModel};
use openmax::OpenMaxModel;
use vim::PcaModel;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("`{0}` needs logits for every sample")]
    MissingLogits(String),
    #[error("covariance is singular even with ridge {epsilon:e}")]
    SingularCovariance { epsilon: f64 },
    #[error("class `{class}` has {have} usable train samples, need at least {need}")]
    TooFewSamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("invalid detector: {0}")]
    InvalidSpec(String),
    #[error("{what} length mismatch: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no train samples")]
    NoTrainData,
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error("weibull fit for class `{class}`: {source}")]
    Weibull {
        class: String,
        #[source]
        source: WeibullError,
    },
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

/// One sample as seen by a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub id: String,
    pub label: String,
    pub features: Vec<T>,
    pub logits: Option<Vec<T>>,
}

impl<T: Real> Observation<T> {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        features: Vec<T>,
        logits: Option<Vec<T>>,
    ) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            features,
            logits,
        }
    }

    pub fn from_sample(s: &FeatureSample) -> Self {
        Self {
            id: s.sample_id.clone(),
            label: s.label.clone(),
            features: cast_slice(&s.features),
            logits: s.logits.as_deref().map(cast_slice),
        }
    }
}

/// Local scores `s_i` of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalScores<T> {
    pub per_class: BTreeMap<String, T>,
    /// The single score of MSP/ViM, or the smallest class score otherwise.
    pub global_raw: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassModel<T> {
    /// The family keeps one model for all classes.
    Global,
    /// Correlation references: the class's standardized train vectors.
    StatRef { size: usize },
    Weibull(OpenMaxModel<T>),
    Gaussian(GaussianModel<T>),
    Pca(PcaModel<T>),
    Knn(KnnIndex<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector<T> {
    spec: DetectorSpec,
    classes: Vec<String>,
    dim: usize,
    logit_dim: Option<usize>,
    per_class_models: BTreeMap<String, ClassModel<T>>,
    global_model: Option<PcaModel<T>>,
    id_score_samples: BTreeMap<String, Vec<T>>,
    refs: ClassReferences<T>,
    policy: SamplingPolicy,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DetectorError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Round-robin cross-fitting over `n` items with up to
/// [`vim::CROSS_FIT_FOLDS`] folds: `fit(held_out, kept)` returns one value
/// per held-out index. `None` when `n < 3` leaves too few items to refit.
fn cross_fit<T: Real>(n: usize, mut fit: impl FnMut(&[usize], &[usize]) -> Vec<T>) -> Option<Vec<T>> {
    if n < 3 {
        return None;
    }
    let folds = vim::CROSS_FIT_FOLDS.min(n);
    let mut out = vec![T::zero(); n];
    for f in 0..folds {
        let held: Vec<usize> = (f..n).step_by(folds).collect();
        let kept: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
        for (&i, v) in held.iter().zip(fit(&held, &kept)) {
            out[i] = v;
        }
    }
    Some(out)
}

impl<T: Real> FittedDetector<T> {
    /// Fits on the train samples of the known classes; the known classes
    /// are the distinct labels of `train`.
    pub fn fit(spec: DetectorSpec, train: &[Observation<T>], policy: &SamplingPolicy) -> Result<Self> {
        spec.validate()?;
        policy.validate()?;
        let first = train.first().ok_or(DetectorError::NoTrainData)?;
        let dim = first.features.len();
        if dim < 2 {
            return Err(ResidualError::TooShort(dim).into());
        }
        for o in train {
            check_len("feature", dim, o.features.len())?;
        }
        let logit_dim = match first.logits.as_ref() {
            Some(l) if train.iter().all(|o| o.logits.as_ref().map(Vec::len) == Some(l.len())) => {
                Some(l.len())
            }
            _ => None,
        };
        if spec.family.needs_logits() && logit_dim.is_none() {
            return Err(DetectorError::MissingLogits(spec.key()));
        }

        let mut groups: BTreeMap<String, Vec<&Observation<T>>> = BTreeMap::new();
        for o in train {
            groups.entry(o.label.clone()).or_default().push(o);
        }
        for (class, members) in groups.iter_mut() {
            members.sort_by(|a, b| a.id.cmp(&b.id));
            if members.len() < 2 {
                return Err(DetectorError::TooFewSamples {
                    class: class.clone(),
                    have: members.len(),
                    need: 2,
                });
            }
        }

        let needs_spfv = spec.base == Base::Residual || spec.family == Family::StatDistance;
        let refs = if needs_spfv {
            let refs = ClassReferences::new(standardize_all(train.iter().map(|o| {
                (o.features.as_slice(), o.id.as_str(), o.label.as_str(), Split::Train)
            })));
            for class in groups.keys() {
                let have = refs.class(class).map_or(0, <[_]>::len);
                if have < 2 {
                    return Err(DetectorError::TooFewSamples {
                        class: class.clone(),
                        have,
                        need: 2,
                    });
                }
            }
            refs
        } else {
            ClassReferences::new(Vec::new())
        };

        let mut det = Self {
            spec,
            classes: groups.keys().cloned().collect(),
            dim,
            logit_dim,
            per_class_models: BTreeMap::new(),
            global_model: None,
            id_score_samples: BTreeMap::new(),
            refs,
            policy: *policy,
        };

        match (spec.family, spec.base) {
            (Family::Msp, _) => det.fit_msp(train),
            (Family::Vim, Base::Feature) => det.fit_vim_feature(train),
            (Family::StatDistance, _) => det.fit_stat()?,
            (Family::Openmax, Base::Feature) => det.fit_openmax_feature(&groups)?,
            (Family::Openmax, Base::Residual) => det.fit_openmax_residual()?,
            (Family::Mahalanobis, Base::Feature) => det.fit_mahalanobis_feature(&groups)?,
            (Family::Mahalanobis, Base::Residual) => det.fit_mahalanobis_residual()?,
            (Family::Vim, Base::Residual) => det.fit_vim_residual(&groups)?,
            (Family::Knn, Base::Feature) => det.fit_knn_feature(&groups)?,
            (Family::Knn, Base::Residual) => det.fit_knn_residual()?,
        }
        Ok(det)
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn per_class_models(&self) -> &BTreeMap<String, ClassModel<T>> {
        &self.per_class_models
    }

    pub fn global_model(&self) -> Option<&PcaModel<T>> {
        self.global_model.as_ref()
    }

    /// ID score distribution per class (`*` for single-score families).
    pub fn id_score_samples(&self) -> &BTreeMap<String, Vec<T>> {
        &self.id_score_samples
    }

    /// Scores one sample; higher is more OOD-like.
    pub fn score(&self, obs: &Observation<T>) -> Result<LocalScores<T>> {
        check_len("feature", self.dim, obs.features.len())?;
        if self.spec.family.needs_logits() {
            let logits = obs
                .logits
                .as_ref()
                .ok_or_else(|| DetectorError::MissingLogits(self.spec.key()))?;
            check_len("logit", self.logit_dim.unwrap_or(0), logits.len())?;
        }

        if self.spec.is_global() {
            let s = self.global_score(obs);
            return Ok(LocalScores {
                per_class: BTreeMap::from([(GLOBAL_KEY.to_string(), s)]),
                global_raw: Some(s),
            });
        }

        let spfv = if self.needs_spfv() {
            Some(Spfv::from_features(
                &obs.features,
                obs.id.as_str(),
                obs.label.as_str(),
                Split::Test,
            )?)
        } else {
            None
        };
        let mut per_class = BTreeMap::new();
        for class in &self.classes {
            let s = self.class_score(obs, spfv.as_ref(), class, false)?;
            per_class.insert(class.clone(), s);
        }
        let global_raw = per_class.values().copied().reduce(T::min);
        Ok(LocalScores {
            per_class,
            global_raw,
        })
    }

    fn needs_spfv(&self) -> bool {
        self.spec.base == Base::Residual || self.spec.family == Family::StatDistance
    }

    fn logits<'a>(&self, obs: &'a Observation<T>) -> &'a [T] {
        obs.logits.as_deref().expect("logits checked before scoring")
    }

    fn global_score(&self, obs: &Observation<T>) -> T {
        let logits = self.logits(obs);
        match self.spec.family {
            Family::Msp => msp::msp_score(logits),
            _ => {
                let pca = self.global_model.as_ref().expect("fitted subspace");
                pca.score(logits, pca.residual_norm(&obs.features), self.spec.params.overwrite)
            }
        }
    }

    fn model(&self, class: &str) -> &ClassModel<T> {
        &self.per_class_models[class]
    }

    /// Per-reference values over the sampled references of `class`,
    /// reduced by the configured aggregation.
    fn aggregate_refs<F>(&self, q: &Spfv<T>, class: &str, exclude_self: bool, f: F) -> Result<T>
    where
        F: Fn(&[T], &[T]) -> Result<T>,
    {
        let picked = self.refs.sample_for(&q.source_id, class, &self.policy, exclude_self);
        if picked.is_empty() {
            return Err(DetectorError::TooFewSamples {
                class: class.to_string(),
                have: 0,
                need: 1,
            });
        }
        let values = picked
            .into_iter()
            .map(|r| f(&q.values, &r.values))
            .collect::<Result<Vec<T>>>()?;
        Ok(self.spec.aggregation.apply(&values))
    }

    /// Aggregated per-reference metric before any family-specific mapping.
    /// `loo` replaces the class model (leave-one-out refits).
    fn raw_metric(
        &self,
        q: &Spfv<T>,
        class: &str,
        exclude_self: bool,
        loo: Option<&ClassModel<T>>,
    ) -> Result<T> {
        let model = || loo.unwrap_or_else(|| self.model(class));
        let form = self.spec.params.form;
        match (self.spec.family, self.spec.base) {
            (Family::StatDistance, Base::Feature) => self.aggregate_refs(q, class, exclude_self, |a, b| {
                Ok(stat::correlation_distance(a, b)?)
            }),
            (Family::StatDistance | Family::Openmax, _) => {
                self.aggregate_refs(q, class, exclude_self, |a, b| {
                    Ok(stat::residual_distance(a, b, form)?)
                })
            }
            (Family::Mahalanobis, _) => {
                let ClassModel::Gaussian(GaussianModel {
                    covariance: Covariance::Diagonal(var),
                    ..
                }) = model()
                else {
                    unreachable!("residual mahalanobis keeps diagonal models")
                };
                self.aggregate_refs(q, class, exclude_self, |a, b| {
                    Ok(mahalanobis::diagonal_distance(&difference(a, b), var))
                })
            }
            (Family::Vim, _) => {
                let ClassModel::Pca(pca) = model() else {
                    unreachable!("residual vim keeps per-class subspaces")
                };
                self.aggregate_refs(q, class, exclude_self, |a, b| {
                    Ok(pca.residual_norm(&difference(a, b)))
                })
            }
            (Family::Knn, _) => self.aggregate_refs(q, class, exclude_self, |a, b| {
                let r = difference(a, b);
                Ok(dot(&r, &r).sqrt())
            }),
            (Family::Msp, _) => unreachable!("msp has no residual metric"),
        }
    }

    fn class_score(
        &self,
        obs: &Observation<T>,
        spfv: Option<&Spfv<T>>,
        class: &str,
        exclude_self: bool,
    ) -> Result<T> {
        let metric = self.spec.params.metric;
        let exclude = exclude_self.then_some(obs.id.as_str());
        if self.spec.base == Base::Feature {
            return match self.model(class) {
                ClassModel::StatRef { .. } => {
                    self.raw_metric(spfv.expect("standardized query"), class, exclude_self, None)
                }
                ClassModel::Weibull(m) => Ok(m.score(m.distance(&obs.features))),
                ClassModel::Gaussian(g) => Ok(g.distance(&obs.features)),
                ClassModel::Knn(idx) => {
                    let d = idx.mean_distance(&obs.features, exclude).ok_or_else(|| {
                        DetectorError::TooFewSamples {
                            class: class.to_string(),
                            have: 0,
                            need: 1,
                        }
                    })?;
                    Ok(knn::oriented(d, metric))
                }
                ClassModel::Global | ClassModel::Pca(_) => {
                    unreachable!("single-score families are scored globally")
                }
            };
        }

        let q = spfv.expect("standardized query");
        let raw = self.raw_metric(q, class, exclude_self, None)?;
        Ok(match self.model(class) {
            ClassModel::Weibull(m) => m.score(raw),
            ClassModel::Pca(pca) => pca.score(self.logits(obs), raw, self.spec.params.overwrite),
            ClassModel::Knn(idx) => {
                let d = idx.mean_distance(&[raw], exclude).ok_or_else(|| {
                    DetectorError::TooFewSamples {
                        class: class.to_string(),
                        have: 0,
                        need: 1,
                    }
                })?;
                knn::oriented(d, metric)
            }
            _ => raw,
        })
    }

    /// Train observations of `class` paired with their standardized vectors.
    fn class_spfvs(&self, class: &str) -> &[Spfv<T>] {
        self.refs.class(class).expect("class has references")
    }

    fn fit_msp(&mut self, train: &[Observation<T>]) {
        for c in &self.classes {
            self.per_class_models.insert(c.clone(), ClassModel::Global);
        }
        let scores = train.iter().map(|o| msp::msp_score(self.logits(o))).collect();
        self.id_score_samples.insert(GLOBAL_KEY.to_string(), scores);
    }

    fn subspace_dim(&self) -> usize {
        self.spec.params.subspace_dim.unwrap_or(self.dim.div_ceil(2))
    }

    fn fit_vim_feature(&mut self, train: &[Observation<T>]) {
        let mut order: Vec<&Observation<T>> = train.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let points: Vec<&[T]> = order.iter().map(|o| o.features.as_slice()).collect();
        let d = self.subspace_dim();
        let mut pca = PcaModel::fit(&points, d);
        let norms = cross_fit(points.len(), |held, kept| {
            let kept: Vec<&[T]> = kept.iter().map(|&i| points[i]).collect();
            let sub = PcaModel::fit(&kept, d);
            held.iter().map(|&i| sub.residual_norm(points[i])).collect()
        })
        .unwrap_or_else(|| points.iter().map(|x| pca.residual_norm(x)).collect());
        pca.calibrate(order.iter().map(|o| self.logits(o)), &norms);
        let overwrite = self.spec.params.overwrite;
        let scores = order
            .iter()
            .zip(&norms)
            .map(|(o, &n)| pca.score(self.logits(o), n, overwrite))
            .collect();
        for c in &self.classes {
            self.per_class_models.insert(c.clone(), ClassModel::Global);
        }
        self.global_model = Some(pca);
        self.id_score_samples.insert(GLOBAL_KEY.to_string(), scores);
    }

    /// Raw aggregated residual metric of every train sample against its own
    /// class, excluding itself.
    fn own_class_raw(&self, class: &str) -> Result<Vec<T>> {
        self.class_spfvs(class)
            .iter()
            .map(|v| self.raw_metric(v, class, true, None))
            .collect()
    }

    fn fit_stat(&mut self) -> Result<()> {
        for c in self.classes.clone() {
            let size = self.class_spfvs(&c).len();
            self.per_class_models.insert(c.clone(), ClassModel::StatRef { size });
            let ids = self.own_class_raw(&c)?;
            self.id_score_samples.insert(c, ids);
        }
        Ok(())
    }

    fn tail_for(&self, class: &str, n: usize) -> Result<usize> {
        let tail = self.spec.params.tail_size.unwrap_or_else(|| openmax::default_tail(n));
        if tail > n {
            return Err(DetectorError::TooFewSamples {
                class: class.to_string(),
                have: n,
                need: tail,
            });
        }
        Ok(tail)
    }

    fn fit_weibull(class: &str, values: &[T], tail: usize) -> Result<WeibullModel<T>> {
        WeibullModel::fit_tail(values, tail).map_err(|source| DetectorError::Weibull {
            class: class.to_string(),
            source,
        })
    }

    fn fit_openmax_feature(&mut self, groups: &BTreeMap<String, Vec<&Observation<T>>>) -> Result<()> {
        for (class, members) in groups {
            let n = members.len();
            let tail = self.tail_for(class, n)?;
            let points: Vec<&[T]> = members.iter().map(|o| o.features.as_slice()).collect();
            let center = mahalanobis::centroid(&points, self.dim);
            // Distance to the centre of the other n - 1 members.
            let inflate = T::of_usize(n) / T::of_usize(n - 1);
            let loo: Vec<T> = points
                .iter()
                .map(|x| crate::scalar::sq_dist(x, &center).sqrt() * inflate)
                .collect();
            let weibull = Self::fit_weibull(class, &loo, tail)?;
            let model = OpenMaxModel {
                center: Some(center),
                weibull,
            };
            let ids = loo.iter().map(|&d| model.score(d)).collect();
            self.per_class_models.insert(class.clone(), ClassModel::Weibull(model));
            self.id_score_samples.insert(class.clone(), ids);
        }
        Ok(())
    }

    fn fit_openmax_residual(&mut self) -> Result<()> {
        for class in self.classes.clone() {
            let raw = self.own_class_raw(&class)?;
            let tail = self.tail_for(&class, raw.len())?;
            let model = OpenMaxModel {
                center: None,
                weibull: Self::fit_weibull(&class, &raw, tail)?,
            };
            let ids = raw.iter().map(|&d| model.score(d)).collect();
            self.per_class_models.insert(class.clone(), ClassModel::Weibull(model));
            self.id_score_samples.insert(class, ids);
        }
        Ok(())
    }

    fn fit_mahalanobis_feature(
        &mut self,
        groups: &BTreeMap<String, Vec<&Observation<T>>>,
    ) -> Result<()> {
        let dim = self.dim;
        let point_groups: Vec<Vec<&[T]>> = groups
            .values()
            .map(|m| m.iter().map(|o| o.features.as_slice()).collect())
            .collect();
        let (means, scatter) = mahalanobis::class_scatter(&point_groups, dim);
        let total: usize = point_groups.iter().map(Vec::len).sum();

        let mut cov = scatter.clone();
        cov.scale(T::of_usize(total).recip());
        let eps0 = mahalanobis::ridge(cov.trace(), dim);
        let (chol, eps) = mahalanobis::regularized_cholesky(&cov, eps0)
            .ok_or(DetectorError::SingularCovariance { epsilon: eps0.as_f64() })?;
        let chol = Arc::new(chol);

        // Leave-one-out: dropping x from class c (n_c members, u = x - μ_c)
        // shifts the centre by -u/(n_c - 1) and the scatter by -a u uᵀ with
        // a = n_c/(n_c - 1). With B = S/(N-1) + εI and q = uᵀB⁻¹u,
        // Sherman-Morrison gives d² = a² q / (1 - a q/(N-1)).
        let big_n = T::of_usize(total - 1);
        let mut loo_cov = scatter;
        loo_cov.scale(big_n.recip());
        let (loo_chol, _) = mahalanobis::regularized_cholesky(&loo_cov, eps)
            .ok_or(DetectorError::SingularCovariance { epsilon: eps.as_f64() })?;

        for ((class, pts), mean) in groups.keys().zip(&point_groups).zip(means) {
            let nc = T::of_usize(pts.len());
            let a = nc / (nc - T::one());
            let ids = pts
                .iter()
                .map(|x| {
                    let u: Vec<T> = x.iter().zip(&mean).map(|(&p, &m)| p - m).collect();
                    let q = loo_chol.inv_quadratic_form(&u);
                    let denom = T::one() - a * q / big_n;
                    let d2 = if denom > T::epsilon() {
                        a * a * q / denom
                    } else {
                        a * a * q
                    };
                    d2.max(T::zero()).sqrt()
                })
                .collect();
            let model = GaussianModel {
                mean,
                covariance: Covariance::Tied(Arc::clone(&chol)),
                epsilon: eps,
            };
            self.per_class_models.insert(class.clone(), ClassModel::Gaussian(model));
            self.id_score_samples.insert(class.clone(), ids);
        }
        Ok(())
    }

    fn fit_mahalanobis_residual(&mut self) -> Result<()> {
        let dim = self.dim;
        for class in self.classes.clone() {
            let owned: Vec<Vec<T>> = self
                .class_spfvs(&class)
                .iter()
                .map(|v| v.values.clone())
                .collect();
            let n = owned.len();
            let points: Vec<&[T]> = owned.iter().map(Vec::as_slice).collect();
            let var = mahalanobis::residual_variance(&points, dim);
            let eps = mahalanobis::ridge(var.iter().copied().sum(), dim);
            let regularized: Vec<T> = var.iter().map(|&v| v + eps).collect();
            self.per_class_models.insert(
                class.clone(),
                ClassModel::Gaussian(GaussianModel {
                    mean: vec![T::zero(); dim],
                    covariance: Covariance::Diagonal(regularized.clone()),
                    epsilon: eps,
                }),
            );

            let mut s1 = vec![T::zero(); dim];
            let mut s2 = vec![T::zero(); dim];
            for x in &points {
                for k in 0..dim {
                    s1[k] += x[k];
                    s2[k] += x[k] * x[k];
                }
            }
            let mut ids = Vec::with_capacity(n);
            for v in self.class_spfvs(&class) {
                let loo = if n >= 3 {
                    let t1: Vec<T> = s1.iter().zip(&v.values).map(|(&s, &x)| s - x).collect();
                    let t2: Vec<T> = s2.iter().zip(&v.values).map(|(&s, &x)| s - x * x).collect();
                    mahalanobis::moments_to_residual_variance(&t1, &t2, n - 1)
                        .into_iter()
                        .map(|w| w + eps)
                        .collect()
                } else {
                    regularized.clone()
                };
                let loo = ClassModel::Gaussian(GaussianModel {
                    mean: vec![T::zero(); dim],
                    covariance: Covariance::Diagonal(loo),
                    epsilon: eps,
                });
                ids.push(self.raw_metric(v, &class, true, Some(&loo))?);
            }
            self.id_score_samples.insert(class, ids);
        }
        Ok(())
    }

    fn fit_vim_residual(&mut self, groups: &BTreeMap<String, Vec<&Observation<T>>>) -> Result<()> {
        let dim = self.dim;
        let d = self.subspace_dim();
        let overwrite = self.spec.params.overwrite;
        // In-class residuals in both orders are centred, and their second
        // moment is twice the class covariance.
        let subspace = |points: &[&[T]]| {
            let (_, mut cov) = mahalanobis::class_scatter(&[points.to_vec()], dim);
            cov.scale(T::lit(2.0) / T::of_usize(points.len() - 1));
            PcaModel::from_covariance(&cov, vec![T::zero(); dim], d)
        };
        for class in self.classes.clone() {
            let members = self.class_spfvs(&class).to_vec();
            let points: Vec<&[T]> = members.iter().map(|v| v.values.as_slice()).collect();
            let mut pca = subspace(&points);
            self.per_class_models.insert(class.clone(), ClassModel::Pca(pca.clone()));

            let mut failure = None;
            let raw = match cross_fit(points.len(), |held, kept| {
                let kept: Vec<&[T]> = kept.iter().map(|&i| points[i]).collect();
                let sub = ClassModel::Pca(subspace(&kept));
                held.iter()
                    .map(|&i| {
                        self.raw_metric(&members[i], &class, true, Some(&sub))
                            .unwrap_or_else(|e| {
                                failure.get_or_insert(e);
                                T::zero()
                            })
                    })
                    .collect()
            }) {
                Some(raw) => raw,
                None => self.own_class_raw(&class)?,
            };
            if let Some(e) = failure {
                return Err(e);
            }

            let by_id: BTreeMap<&str, &Observation<T>> =
                groups[&class].iter().map(|o| (o.id.as_str(), *o)).collect();
            let logits: Vec<&[T]> = members
                .iter()
                .map(|v| self.logits(by_id[v.source_id.as_str()]))
                .collect();
            pca.calibrate(logits.iter().copied(), &raw);
            let ids = logits
                .iter()
                .zip(&raw)
                .map(|(l, &r)| pca.score(l, r, overwrite))
                .collect();
            self.per_class_models.insert(class.clone(), ClassModel::Pca(pca));
            self.id_score_samples.insert(class, ids);
        }
        Ok(())
    }

    fn k(&self) -> usize {
        self.spec.params.k.unwrap_or(DEFAULT_K)
    }

    fn fit_knn_feature(&mut self, groups: &BTreeMap<String, Vec<&Observation<T>>>) -> Result<()> {
        let metric = self.spec.params.metric;
        for (class, members) in groups {
            let index = KnnIndex {
                references: members.iter().map(|o| o.features.clone()).collect(),
                ids: members.iter().map(|o| o.id.clone()).collect(),
                k: self.k(),
            };
            let ids = members
                .iter()
                .map(|o| {
                    index
                        .mean_distance(&o.features, Some(&o.id))
                        .map(|d| knn::oriented(d, metric))
                        .expect("class has another member")
                })
                .collect();
            self.per_class_models.insert(class.clone(), ClassModel::Knn(index));
            self.id_score_samples.insert(class.clone(), ids);
        }
        Ok(())
    }

    fn fit_knn_residual(&mut self) -> Result<()> {
        let metric = self.spec.params.metric;
        for class in self.classes.clone() {
            let raw = self.own_class_raw(&class)?;
            let index = KnnIndex {
                references: raw.iter().map(|&r| vec![r]).collect(),
                ids: self
                    .class_spfvs(&class)
                    .iter()
                    .map(|v| v.source_id.clone())
                    .collect(),
                k: self.k(),
            };
            let ids = index
                .ids
                .iter()
                .zip(&raw)
                .map(|(id, &r)| {
                    index
                        .mean_distance(&[r], Some(id))
                        .map(|d| knn::oriented(d, metric))
                        .expect("class has another member")
                })
                .collect();
            self.per_class_models.insert(class.clone(), ClassModel::Knn(index));
            self.id_score_samples.insert(class, ids);
        }
        Ok(())
    }
}

/// Full covariance of the given points about their mean (population
/// normalisation); exposed for diagnostics and tests.
pub fn covariance<T: Real>(points: &[&[T]]) -> SquareMatrix<T> {
    let dim = points[0].len();
    let (_, mut s) = mahalanobis::class_scatter(&[points.to_vec()], dim);
    s.scale(T::of_usize(points.len()).recip());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(id: &str, label: &str, f: &[f64], logits: Option<&[f64]>) -> Observation<f64> {
        Observation::new(id, label, f.to_vec(), logits.map(<[f64]>::to_vec))
    }

    fn toy() -> Vec<Observation<f64>> {
        let mut out = Vec::new();
        for i in 0..8 {
            let t = i as f64;
            let a = [1.0 + 0.1 * t, -0.5 + 0.05 * (t * t % 3.0), 0.3 * (t % 2.0), 2.0, -1.0];
            let b = [-2.0, 0.5 * (t % 3.0), 1.0 + 0.1 * t, -1.0 - 0.07 * t, 3.0];
            out.push(obs(&format!("a{i}"), "A", &a, Some(&[2.0, -1.0])));
            out.push(obs(&format!("b{i}"), "B", &b, Some(&[-1.0, 2.0])));
        }
        out
    }

    fn all_specs() -> Vec<DetectorSpec> {
        let mut specs = Vec::new();
        for family in Family::ALL {
            for base in [Base::Feature, Base::Residual] {
                for agg in [Aggregation::Mean, Aggregation::Max, Aggregation::Min] {
                    let s = DetectorSpec::new(family, base, agg);
                    if s.validate().is_ok() {
                        specs.push(s);
                    }
                }
            }
        }
        specs
    }

    #[test]
    fn every_spec_fits_and_scores() {
        let train = toy();
        let policy = SamplingPolicy::full();
        let probe = obs("t0", "A", &[1.2, -0.4, 0.1, 2.1, -0.9], Some(&[1.5, -0.5]));
        for spec in all_specs() {
            let det = FittedDetector::fit(spec, &train, &policy).unwrap();
            assert_eq!(det.per_class_models().len(), 2, "{spec}");
            let s = det.score(&probe).unwrap();
            assert!(s.per_class.values().all(|v| v.is_finite()), "{spec}");
            for (class, ids) in det.id_score_samples() {
                assert!(!ids.is_empty(), "{spec} {class}");
                assert!(ids.iter().all(|v| v.is_finite()), "{spec}");
            }
            if spec.is_global() {
                assert_eq!(s.per_class.keys().collect::<Vec<_>>(), vec![GLOBAL_KEY]);
            } else {
                assert_eq!(s.per_class.len(), 2);
            }
        }
    }

    #[test]
    fn preconditions() {
        let mut train = toy();
        for o in &mut train {
            o.logits = None;
        }
        let policy = SamplingPolicy::full();
        let vim: DetectorSpec = "vim:feature:mean".parse().unwrap();
        assert_eq!(
            FittedDetector::fit(vim, &train, &policy).unwrap_err(),
            DetectorError::MissingLogits("vim:feature:mean".into())
        );
        let mut om: DetectorSpec = "openmax:feature:mean".parse().unwrap();
        om.params.tail_size = Some(9);
        assert!(matches!(
            FittedDetector::fit(om, &train, &policy).unwrap_err(),
            DetectorError::TooFewSamples { need: 9, .. }
        ));
        let knn: DetectorSpec = "knn:feature:mean".parse().unwrap();
        assert_eq!(
            FittedDetector::fit(knn, &train[..3], &policy).unwrap_err(),
            DetectorError::TooFewSamples {
                class: "B".into(),
                have: 1,
                need: 2
            }
        );
        let det = FittedDetector::fit(knn, &train, &policy).unwrap();
        assert!(matches!(
            det.score(&obs("x", "A", &[1.0, 2.0], None)),
            Err(DetectorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stat_feature_self_match_is_zero() {
        let train = toy();
        let spec: DetectorSpec = "stat_distance:residual:min".parse().unwrap();
        let det = FittedDetector::fit(spec, &train, &SamplingPolicy::full()).unwrap();
        let mut probe = train[0].clone();
        probe.id = "copy".into();
        let s = det.score(&probe).unwrap();
        assert!(s.per_class["A"].abs() < 1e-12);
        assert!(s.per_class["B"] > 0.5);
    }

    #[test]
    fn mahalanobis_leave_one_out_matches_refit() {
        let train = toy();
        let spec: DetectorSpec = "mahalanobis:feature:mean".parse().unwrap();
        let policy = SamplingPolicy::full();
        let det = FittedDetector::fit(spec, &train, &policy).unwrap();
        for (pos, held) in [(0usize, "a0"), (5, "b2")] {
            let rest: Vec<_> = train.iter().filter(|o| o.id != held).cloned().collect();
            let refit = FittedDetector::fit(spec, &rest, &policy).unwrap();
            let direct = refit.score(&train[pos]).unwrap().per_class[&train[pos].label];
            let members: Vec<_> = train.iter().filter(|o| o.label == train[pos].label).collect();
            let idx = members.iter().position(|o| o.id == held).unwrap();
            let loo = det.id_score_samples()[&train[pos].label][idx];
            // The ridge differs slightly between the two fits.
            assert!((direct - loo).abs() < 1e-4 * direct.max(1.0), "{direct} vs {loo}");
        }
    }
}
