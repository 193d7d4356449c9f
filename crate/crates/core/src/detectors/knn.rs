//! k-nearest-neighbour distances.

use serde::{Deserialize, Serialize};

use super::KnnMetric;
use crate::scalar::{sq_dist, Real};

/// Distances below this are clamped before taking a reciprocal.
pub const MIN_DISTANCE: f64 = 1e-12;

/// Reference points of one class. For the residual base each point is a
/// single aggregated residual score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnIndex<T> {
    pub references: Vec<Vec<T>>,
    pub ids: Vec<String>,
    pub k: usize,
}

impl<T: Real> KnnIndex<T> {
    /// Mean Euclidean distance to the `k` nearest references, skipping the
    /// reference whose id is `exclude`. `None` when nothing is left.
    pub fn mean_distance(&self, query: &[T], exclude: Option<&str>) -> Option<T> {
        let dists: Vec<T> = self
            .references
            .iter()
            .zip(&self.ids)
            .filter(|(_, id)| exclude != Some(id.as_str()))
            .map(|(r, _)| sq_dist(query, r).sqrt())
            .collect();
        k_smallest_mean(dists, self.k)
    }
}

/// Mean of the `k` smallest values (all of them when fewer than `k`).
pub fn k_smallest_mean<T: Real>(mut values: Vec<T>, k: usize) -> Option<T> {
    if values.is_empty() || k == 0 {
        return None;
    }
    let k = k.min(values.len());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Some(values[..k].iter().copied().sum::<T>() / T::of_usize(k))
}

/// Reciprocal distance.
pub fn density<T: Real>(distance: T) -> T {
    distance.max(T::lit(MIN_DISTANCE)).recip()
}

/// Orients a mean kNN distance so that higher means more OOD.
pub fn oriented<T: Real>(distance: T, metric: KnnMetric) -> T {
    match metric {
        KnnMetric::Distance => distance,
        KnnMetric::Density => -density(distance),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(points: &[f64], k: usize) -> KnnIndex<f64> {
        KnnIndex {
            references: points.iter().map(|&p| vec![p]).collect(),
            ids: (0..points.len()).map(|i| i.to_string()).collect(),
            k,
        }
    }

    #[test]
    fn one_dimensional_example() {
        let idx = index(&[0.0, 1.0, 2.0], 1);
        let d = idx.mean_distance(&[0.4], None).unwrap();
        assert!((d - 0.4).abs() < 1e-15);
        assert!((density(d) - 2.5).abs() < 1e-12);
        assert!((oriented(d, KnnMetric::Density) + 2.5).abs() < 1e-12);
    }

    #[test]
    fn k_equal_to_class_size_is_mean_distance() {
        let idx = index(&[0.0, 1.0, 2.0], 3);
        let d = idx.mean_distance(&[4.0], None).unwrap();
        assert!((d - 3.0).abs() < 1e-15);
        let d = idx.mean_distance(&[4.0], Some("2")).unwrap();
        assert!((d - 3.5).abs() < 1e-15);
    }

    #[test]
    fn empty_after_exclusion() {
        let idx = index(&[1.0], 1);
        assert_eq!(idx.mean_distance(&[0.0], Some("0")), None);
    }
}
