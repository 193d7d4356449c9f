//! Correlation and residual statistical distances.

use crate::residual::ResidualError;
use crate::scalar::Real;
use crate::stats::{pair_stats, pearson_values, stat_distance, DistanceForm};

/// `1 - ρ` between two standardized vectors.
pub fn correlation_distance<T: Real>(query: &[T], reference: &[T]) -> Result<T, ResidualError> {
    Ok(T::one() - pearson_values(query, reference)?)
}

/// Statistical distance of the residual `query - reference`.
pub fn residual_distance<T: Real>(
    query: &[T],
    reference: &[T],
    form: DistanceForm,
) -> Result<T, ResidualError> {
    let s = pair_stats(query, reference)?;
    Ok(stat_distance(s.rho, s.variance, form).value)
}
