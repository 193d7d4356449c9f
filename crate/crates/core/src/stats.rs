//! Residual-pair statistics and the statistical distance built on them.
//!
//! For two standardized vectors `a`, `b` of length D, the residual
//! `r = a - b` has mean 0 and population variance `2 (1 - ρ)` where
//! `ρ = (1/D) Σ a_k b_k`. Variance therefore lies in [0, 4].

use serde::{Deserialize, Serialize};

use crate::residual::{difference, ResidualError, ResidualVector, Spfv, DEGENERATE_VARIANCE};
use crate::scalar::Real;

/// Pearson correlation of two standardized vectors, clamped to [-1, 1].
pub fn pearson_values<T: Real>(a: &[T], b: &[T]) -> Result<T, ResidualError> {
    if a.len() != b.len() {
        return Err(ResidualError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let rho = crate::scalar::dot(a, b) / T::of_usize(a.len());
    Ok(rho.max(-T::one()).min(T::one()))
}

pub fn pearson<T: Real>(a: &Spfv<T>, b: &Spfv<T>) -> Result<T, ResidualError> {
    pearson_values(&a.values, &b.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats<T> {
    pub mean: T,
    pub variance: T,
    pub rho: T,
    pub skewness: T,
    pub kurtosis: T,
    /// Variance below 1e-12: skewness and kurtosis are reported as 0.
    pub degenerate: bool,
}

/// Population moments over the components of a residual; `rho` is passed
/// through untouched.
pub fn residual_stats_values<T: Real>(r: &[T], rho: T) -> Result<ResidualStats<T>, ResidualError> {
    if r.len() < 2 {
        return Err(ResidualError::TooShort(r.len()));
    }
    let n = T::of_usize(r.len());
    let mean = r.iter().copied().sum::<T>() / n;
    let (mut m2, mut m3, mut m4) = (T::zero(), T::zero(), T::zero());
    for &x in r {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !(m2.as_f64() >= DEGENERATE_VARIANCE) {
        return Ok(ResidualStats {
            mean,
            variance: m2,
            rho,
            skewness: T::zero(),
            kurtosis: T::zero(),
            degenerate: true,
        });
    }
    Ok(ResidualStats {
        mean,
        variance: m2,
        rho,
        skewness: m3 / (m2 * m2.sqrt()),
        kurtosis: m4 / (m2 * m2),
        degenerate: false,
    })
}

pub fn residual_stats<T: Real>(
    r: &ResidualVector<T>,
    rho: T,
) -> Result<ResidualStats<T>, ResidualError> {
    residual_stats_values(&r.values, rho)
}

/// Statistics of the residual `a - b` of two standardized vectors, with
/// variance clamped to its theoretical range [0, 4].
pub fn pair_stats<T: Real>(a: &[T], b: &[T]) -> Result<ResidualStats<T>, ResidualError> {
    let rho = pearson_values(a, b)?;
    let mut stats = residual_stats_values(&difference(a, b), rho)?;
    stats.variance = stats.variance.max(T::zero()).min(T::lit(4.0));
    Ok(stats)
}

/// Which spread term joins `1 - ρ` in the statistical distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `1 - ρ + σ²`.
    #[default]
    VarianceTerm,
    /// `1 - ρ + σ`.
    StdTerm,
    /// `1 - ρ`.
    RhoOnly,
}

impl std::str::FromStr for DistanceForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "variance_term" | "variance" => Ok(Self::VarianceTerm),
            "std_term" | "std" => Ok(Self::StdTerm),
            "rho_only" | "rho" => Ok(Self::RhoOnly),
            other => Err(format!("unknown distance form `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatDistance<T> {
    pub value: T,
    pub one_minus_rho: T,
    pub sigma_term: T,
}

pub fn stat_distance<T: Real>(rho: T, variance: T, form: DistanceForm) -> StatDistance<T> {
    let one_minus_rho = T::one() - rho;
    let sigma_term = match form {
        DistanceForm::VarianceTerm => variance,
        DistanceForm::StdTerm => variance.max(T::zero()).sqrt(),
        DistanceForm::RhoOnly => T::zero(),
    };
    StatDistance {
        value: one_minus_rho + sigma_term,
        one_minus_rho,
        sigma_term,
    }
}
