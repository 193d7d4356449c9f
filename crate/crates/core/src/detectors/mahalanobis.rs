//! Gaussian class models and Mahalanobis distances.

use std::sync::Arc;

use crate::linalg::{Cholesky, SquareMatrix};
use crate::scalar::Real;

/// Relative ridge: `ε = 1e-6 · trace(Σ) / D`.
pub const RIDGE_FACTOR: f64 = 1e-6;
/// Ridge escalations (×10 each) before giving up on a covariance.
pub const RIDGE_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T> {
    /// Shared full covariance, factorised after regularisation.
    Tied(Arc<Cholesky<T>>),
    /// Per-coordinate variances, regularisation already added.
    Diagonal(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel<T> {
    pub mean: Vec<T>,
    pub covariance: Covariance<T>,
    pub epsilon: T,
}

impl<T: Real> GaussianModel<T> {
    pub fn distance(&self, x: &[T]) -> T {
        let u: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        match &self.covariance {
            Covariance::Tied(chol) => chol.inv_quadratic_form(&u).max(T::zero()).sqrt(),
            Covariance::Diagonal(var) => diagonal_distance(&u, var),
        }
    }
}

/// `√(uᵀ Σ⁻¹ u)` for a factorised `Σ`.
pub fn mahalanobis_distance<T: Real>(chol: &Cholesky<T>, mean: &[T], x: &[T]) -> T {
    let u: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    chol.inv_quadratic_form(&u).max(T::zero()).sqrt()
}

pub fn diagonal_distance<T: Real>(u: &[T], variances: &[T]) -> T {
    u.iter()
        .zip(variances)
        .map(|(&d, &v)| d * d / v)
        .sum::<T>()
        .sqrt()
}

/// Default ridge for a covariance with the given trace.
pub fn ridge<T: Real>(trace: T, dim: usize) -> T {
    let eps = T::lit(RIDGE_FACTOR) * trace / T::of_usize(dim);
    if eps > T::zero() {
        eps
    } else {
        T::lit(RIDGE_FACTOR)
    }
}

/// Factorises `Σ + εI`, multiplying ε by 10 on failure. Returns the factor
/// and the ε that worked.
pub fn regularized_cholesky<T: Real>(cov: &SquareMatrix<T>, eps: T) -> Option<(Cholesky<T>, T)> {
    let mut eps = eps;
    for _ in 0..=RIDGE_RETRIES {
        let mut m = cov.clone();
        m.add_diagonal(eps);
        if let Some(c) = Cholesky::new(&m) {
            return Some((c, eps));
        }
        eps *= T::lit(10.0);
    }
    None
}

/// Class means and the pooled within-class scatter `S = Σ_c Σ_i (x_i - μ_c)(x_i - μ_c)ᵀ`.
pub fn class_scatter<T: Real>(groups: &[Vec<&[T]>], dim: usize) -> (Vec<Vec<T>>, SquareMatrix<T>) {
    let mut scatter = SquareMatrix::zeros(dim);
    let mut means = Vec::with_capacity(groups.len());
    for group in groups {
        let mean = centroid(group, dim);
        for x in group {
            let u: Vec<T> = x.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
            scatter.rank_one_update(T::one(), &u);
        }
        means.push(mean);
    }
    (means, scatter)
}

pub fn centroid<T: Real>(points: &[&[T]], dim: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); dim];
    for x in points {
        for (m, &v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    let n = T::of_usize(points.len());
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Mean square of the in-class residuals `x_i - x_j` (both orders) per
/// coordinate. Over all pairs this equals twice the unbiased per-coordinate
/// variance, so it is computed from first and second moments.
pub fn residual_variance<T: Real>(points: &[&[T]], dim: usize) -> Vec<T> {
    let n = points.len();
    let mut s1 = vec![T::zero(); dim];
    let mut s2 = vec![T::zero(); dim];
    for x in points {
        for k in 0..dim {
            s1[k] += x[k];
            s2[k] += x[k] * x[k];
        }
    }
    moments_to_residual_variance(&s1, &s2, n)
}

pub(crate) fn moments_to_residual_variance<T: Real>(s1: &[T], s2: &[T], n: usize) -> Vec<T> {
    let nf = T::of_usize(n);
    let two = T::lit(2.0);
    s1.iter()
        .zip(s2)
        .map(|(&a, &b)| (two * (b - a * a / nf) / (nf - T::one())).max(T::zero()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_under_identity() {
        let chol = Cholesky::new(&SquareMatrix::<f64>::identity(2)).unwrap();
        assert!((mahalanobis_distance(&chol, &[0.0, 0.0], &[3.0, 4.0]) - 5.0).abs() < 1e-12);
        let mut two = SquareMatrix::<f64>::identity(2);
        two.scale(2.0);
        let chol = Cholesky::new(&two).unwrap();
        let d = mahalanobis_distance(&chol, &[0.0, 0.0], &[2.0, 0.0]);
        assert!((d - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn residual_variance_matches_pair_enumeration() {
        let pts: Vec<Vec<f64>> = vec![
            vec![0.5, -1.0, 2.0],
            vec![1.5, 0.0, -2.0],
            vec![-0.5, 3.0, 0.0],
            vec![2.0, 1.0, 1.0],
        ];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fast = residual_variance(&refs, 3);
        let mut slow = [0.0; 3];
        let mut count = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    for k in 0..3 {
                        slow[k] += (pts[i][k] - pts[j][k]).powi(2);
                    }
                    count += 1.0;
                }
            }
        }
        for k in 0..3 {
            assert!((fast[k] - slow[k] / count).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_escalates() {
        let zero = SquareMatrix::<f64>::zeros(3);
        let (_, eps) = regularized_cholesky(&zero, 1e-6).unwrap();
        assert_eq!(eps, 1e-6);
        let mut neg = SquareMatrix::<f64>::identity(2);
        neg.scale(-1e-4);
        let (_, eps) = regularized_cholesky(&neg, 1e-6).unwrap();
        assert!(eps > 1e-4);
        assert_eq!(ridge(0.0_f64, 4), 1e-6);
    }
}
