//! Detector configuration and the `family:base:aggregation` registry key.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::stats::DistanceForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Msp,
    StatDistance,
    Openmax,
    Mahalanobis,
    Vim,
    Knn,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Msp,
        Family::StatDistance,
        Family::Openmax,
        Family::Mahalanobis,
        Family::Vim,
        Family::Knn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Msp => "msp",
            Family::StatDistance => "stat_distance",
            Family::Openmax => "openmax",
            Family::Mahalanobis => "mahalanobis",
            Family::Vim => "vim",
            Family::Knn => "knn",
        }
    }

    pub fn needs_logits(self) -> bool {
        matches!(self, Family::Msp | Family::Vim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Feature,
    Residual,
}

impl Base {
    pub fn as_str(self) -> &'static str {
        match self {
            Base::Feature => "feature",
            Base::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Min,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Min => "min",
        }
    }

    /// Reduces a non-empty slice. Panics on an empty slice.
    pub fn apply<T: crate::Real>(self, values: &[T]) -> T {
        assert!(!values.is_empty(), "aggregating an empty score set");
        let lo = values.iter().copied().fold(T::infinity(), T::min);
        let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
        match self {
            Aggregation::Mean => crate::scalar::mean(values).max(lo).min(hi),
            Aggregation::Max => hi,
            Aggregation::Min => lo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    #[default]
    Distance,
    /// Reciprocal distance, negated so that higher still means more OOD.
    Density,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = DetectorError;
            fn from_str(s: &str) -> Result<Self, DetectorError> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(DetectorError::InvalidSpec(format!(
                        concat!("unknown ", $what, " `{}`"), other
                    ))),
                }
            }
        }
    };
}

parse_enum!(Family, "family",
    "msp" => Family::Msp,
    "stat_distance" => Family::StatDistance,
    "stat" => Family::StatDistance,
    "openmax" => Family::Openmax,
    "mahalanobis" => Family::Mahalanobis,
    "vim" => Family::Vim,
    "knn" => Family::Knn,
);
parse_enum!(Base, "base", "feature" => Base::Feature, "residual" => Base::Residual);
parse_enum!(Aggregation, "aggregation",
    "mean" => Aggregation::Mean,
    "max" => Aggregation::Max,
    "min" => Aggregation::Min,
);
parse_enum!(KnnMetric, "knn metric",
    "distance" => KnnMetric::Distance,
    "density" => KnnMetric::Density,
);

/// Family-specific knobs; `None` picks the documented default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// kNN neighbours (default 5).
    pub k: Option<usize>,
    pub metric: KnnMetric,
    /// OpenMax tail (default `min(20, ceil(N_m / 2))`, at least 2).
    pub tail_size: Option<usize>,
    /// Accepted for configuration compatibility; the single-score OpenMax
    /// variant does not revise the top logits.
    pub alpha_top: Option<usize>,
    /// ViM principal subspace dimension (default `ceil(D / 2)`).
    pub subspace_dim: Option<usize>,
    /// ViM: replace the last logit with the virtual logit instead of
    /// appending it.
    pub overwrite: bool,
    /// Statistical-distance form for residual-base scoring.
    pub form: DistanceForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecObject")]
pub struct DetectorSpec {
    pub family: Family,
    pub base: Base,
    pub aggregation: Aggregation,
    pub params: DetectorParams,
}

impl DetectorSpec {
    pub fn new(family: Family, base: Base, aggregation: Aggregation) -> Self {
        Self {
            family,
            base,
            aggregation,
            params: DetectorParams::default(),
        }
    }

    pub fn with_params(mut self, params: DetectorParams) -> Self {
        self.params = params;
        self
    }

    /// `family:base:aggregation`.
    pub fn key(&self) -> String {
        format!(
            "{}:{}:{}",
            self.family.as_str(),
            self.base.as_str(),
            self.aggregation.as_str()
        )
    }

    /// Emits one score for the whole sample instead of one per class.
    pub fn is_global(&self) -> bool {
        match self.family {
            Family::Msp => true,
            Family::Vim => self.base == Base::Feature,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.family == Family::Msp && self.base == Base::Residual {
            return Err(DetectorError::InvalidSpec(
                "msp scores logits only and has no residual form".into(),
            ));
        }
        if self.params.overwrite && self.family != Family::Vim {
            return Err(DetectorError::InvalidSpec(
                "`overwrite` applies to vim only".into(),
            ));
        }
        if self.params.k == Some(0) {
            return Err(DetectorError::InvalidSpec("k must be positive".into()));
        }
        if self.params.subspace_dim == Some(0) {
            return Err(DetectorError::InvalidSpec(
                "subspace_dim must be positive".into(),
            ));
        }
        if matches!(self.params.tail_size, Some(t) if t < 2) {
            return Err(DetectorError::InvalidSpec("tail_size must be >= 2".into()));
        }
        Ok(())
    }
}

impl FromStr for DetectorSpec {
    type Err = DetectorError;

    /// Parses `family:base[:aggregation]`; aggregation defaults to mean.
    fn from_str(key: &str) -> Result<Self, DetectorError> {
        let parts: Vec<&str> = key.split(':').collect();
        let (family, base, aggregation) = match parts.as_slice() {
            [f, b] => (f.parse()?, b.parse()?, Aggregation::Mean),
            [f, b, a] => (f.parse()?, b.parse()?, a.parse()?),
            _ => {
                return Err(DetectorError::InvalidSpec(format!(
                    "detector key `{key}` is not family:base:aggregation"
                )))
            }
        };
        let spec = DetectorSpec::new(family, base, aggregation);
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecRepr {
    Key(String),
    Object(SpecObject),
}

#[derive(Serialize, Deserialize)]
struct SpecObject {
    key: String,
    #[serde(default)]
    params: DetectorParams,
}

impl TryFrom<SpecRepr> for DetectorSpec {
    type Error = DetectorError;
    fn try_from(repr: SpecRepr) -> Result<Self, DetectorError> {
        match repr {
            SpecRepr::Key(k) => k.parse(),
            SpecRepr::Object(obj) => {
                let spec = obj.key.parse::<DetectorSpec>()?.with_params(obj.params);
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

impl From<DetectorSpec> for SpecObject {
    fn from(spec: DetectorSpec) -> Self {
        SpecObject {
            key: spec.key(),
            params: spec.params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_round_trip() {
        let spec: DetectorSpec = "stat_distance:residual:max".parse().unwrap();
        assert_eq!(spec.family, Family::StatDistance);
        assert_eq!(spec.aggregation, Aggregation::Max);
        assert_eq!(spec.key(), "stat_distance:residual:max");
        let short: DetectorSpec = "knn:feature".parse().unwrap();
        assert_eq!(short.aggregation, Aggregation::Mean);
        assert!("msp:residual:mean".parse::<DetectorSpec>().is_err());
        assert!("nope:feature:mean".parse::<DetectorSpec>().is_err());
        assert!("a:b:c:d".parse::<DetectorSpec>().is_err());
    }

    #[test]
    fn serde_accepts_string_or_object() {
        let a: DetectorSpec = serde_json::from_str("\"mahalanobis:feature:mean\"").unwrap();
        assert_eq!(a.family, Family::Mahalanobis);
        let b: DetectorSpec = serde_json::from_str(
            r#"{"key": "vim:feature:mean", "params": {"overwrite": true, "subspace_dim": 4}}"#,
        )
        .unwrap();
        assert!(b.params.overwrite);
        let back: DetectorSpec = serde_json::from_str(&serde_json::to_string(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<DetectorSpec>(
            r#"{"key": "knn:feature:mean", "params": {"overwrite": true}}"#
        )
        .is_err());
    }

    #[test]
    fn aggregation_order() {
        let xs = [3.0_f64, -1.0, 2.5, 0.0];
        let (lo, mid, hi) = (
            Aggregation::Min.apply(&xs),
            Aggregation::Mean.apply(&xs),
            Aggregation::Max.apply(&xs),
        );
        assert_eq!((lo, hi), (-1.0, 3.0));
        assert!(lo <= mid && mid <= hi);
    }
}
