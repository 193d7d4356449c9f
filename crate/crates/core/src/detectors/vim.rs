//! Principal-subspace residuals and virtual logits.

use serde::{Deserialize, Serialize};

use crate::linalg::{symmetric_eigen, SquareMatrix};
use crate::scalar::{dot, Real};

/// Folds used to score train samples against subspaces fitted without them.
pub const CROSS_FIT_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel<T> {
    pub center: Vec<T>,
    /// `d` orthonormal principal directions, each of length D.
    pub basis: Vec<Vec<T>>,
    /// Virtual-logit scale.
    pub alpha: T,
    /// Constant added to every logit before scoring.
    pub logit_shift: T,
    /// Residual norms at or below this are treated as numerically zero.
    pub noise_floor: T,
}

impl<T: Real> PcaModel<T> {
    /// Principal basis of the given second-moment matrix (already centred).
    pub fn from_covariance(cov: &SquareMatrix<T>, center: Vec<T>, subspace_dim: usize) -> Self {
        let eig = symmetric_eigen(cov);
        let d = subspace_dim.min(cov.dim());
        let trace = (0..cov.dim()).fold(T::zero(), |acc, i| acc + cov[(i, i)]);
        Self {
            noise_floor: trace.max(T::zero()).sqrt() * T::epsilon().sqrt(),
            center,
            basis: eig.vectors.into_iter().take(d).collect(),
            alpha: T::one(),
            logit_shift: T::zero(),
        }
    }

    /// PCA of `points` about their mean.
    pub fn fit(points: &[&[T]], subspace_dim: usize) -> Self {
        let dim = points[0].len();
        let center = super::mahalanobis::centroid(points, dim);
        let mut cov = SquareMatrix::zeros(dim);
        for x in points {
            let u: Vec<T> = x.iter().zip(&center).map(|(&a, &b)| a - b).collect();
            cov.rank_one_update(T::one(), &u);
        }
        cov.scale(T::of_usize(points.len()).recip());
        Self::from_covariance(&cov, center, subspace_dim)
    }

    pub fn subspace_dim(&self) -> usize {
        self.basis.len()
    }

    /// `‖(x - c) - P (x - c)‖` with `P` the projector onto the basis.
    pub fn residual_norm(&self, x: &[T]) -> T {
        let mut u: Vec<T> = x.iter().zip(&self.center).map(|(&a, &b)| a - b).collect();
        for b in &self.basis {
            let c = dot(&u, b);
            for (ui, &bi) in u.iter_mut().zip(b) {
                *ui -= c * bi;
            }
        }
        dot(&u, &u).max(T::zero()).sqrt()
    }

    /// `max_{ij} |(BᵀB - I)_{ij}|`.
    pub fn orthonormality_error(&self) -> T {
        let mut worst = T::zero();
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    /// Sets `logit_shift` and `alpha` from the train logits and the train
    /// residual norms.
    pub fn calibrate<'a>(&mut self, logits: impl IntoIterator<Item = &'a [T]>, norms: &[T])
    where
        T: 'a,
    {
        let all: Vec<&[T]> = logits.into_iter().collect();
        self.logit_shift = logit_shift(&all);
        let max_logits: Vec<T> = all.iter().map(|l| max_logit(l) + self.logit_shift).collect();
        let mean_norm = crate::scalar::mean(norms);
        self.alpha = if mean_norm > self.noise_floor {
            alpha(crate::scalar::mean(&max_logits), mean_norm)
        } else {
            T::one()
        };
    }

    /// ViM score of a sample with the given logits and residual norm, as
    /// the log-odds of the virtual-logit probability.
    pub fn score(&self, logits: &[T], norm: T, overwrite: bool) -> T {
        let shifted: Vec<T> = logits.iter().map(|&l| l + self.logit_shift).collect();
        vim_log_odds(&shifted, self.alpha * norm, overwrite)
    }
}

/// Offset that makes the smallest train logit zero when the mean max train
/// logit is not positive (otherwise 0).
pub fn logit_shift<T: Real>(logits: &[&[T]]) -> T {
    if logits.is_empty() {
        return T::zero();
    }
    let maxes: Vec<T> = logits.iter().map(|l| max_logit(l)).collect();
    if crate::scalar::mean(&maxes) > T::zero() {
        return T::zero();
    }
    let lowest = logits
        .iter()
        .flat_map(|l| l.iter().copied())
        .fold(T::infinity(), T::min);
    -lowest
}

/// `mean max logit / mean residual norm`; 1 when every norm is zero.
pub fn alpha<T: Real>(mean_max_logit: T, mean_norm: T) -> T {
    if mean_norm > T::zero() {
        mean_max_logit / mean_norm
    } else {
        T::one()
    }
}

/// Softmax probability of `virtual_logit` once it is appended to `logits`
/// (or, with `overwrite`, written over the last entry).
pub fn vim_score<T: Real>(logits: &[T], virtual_logit: T, overwrite: bool) -> T {
    let kept = if overwrite && !logits.is_empty() {
        &logits[..logits.len() - 1]
    } else {
        logits
    };
    let top = kept.iter().copied().fold(virtual_logit, T::max);
    let v = (virtual_logit - top).exp();
    let rest: T = kept.iter().map(|&l| (l - top).exp()).sum();
    v / (v + rest)
}

/// `ln(p / (1 - p))` for `p = vim_score(logits, virtual_logit, overwrite)`,
/// computed without forming `p`.
pub fn vim_log_odds<T: Real>(logits: &[T], virtual_logit: T, overwrite: bool) -> T {
    let kept = if overwrite && !logits.is_empty() {
        &logits[..logits.len() - 1]
    } else {
        logits
    };
    if kept.is_empty() {
        return T::infinity();
    }
    let top = max_logit(kept);
    let lse = top + kept.iter().map(|&l| (l - top).exp()).sum::<T>().ln();
    virtual_logit - lse
}

pub fn max_logit<T: Real>(logits: &[T]) -> T {
    logits.iter().copied().fold(T::neg_infinity(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha(3.5_f64, 3.5), 1.0);
        assert_eq!(alpha(3.5_f64, 0.0), 1.0);
    }

    #[test]
    fn subspace_members_have_zero_residual() {
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = i as f64;
                vec![t, 2.0 * t, -t]
            })
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let pca = PcaModel::fit(&refs, 1);
        assert!(pca.residual_norm(&[20.0, 40.0, -20.0]) < 1e-9);
        assert!(pca.residual_norm(&[4.5, 9.0, 0.0]) > 1.0);
        assert!(pca.orthonormality_error() < 1e-8);
    }

    #[test]
    fn full_subspace_gives_uniform_virtual_logit() {
        let pts: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 2.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let pca = PcaModel::fit(&refs, 2);
        let n = pca.residual_norm(&[7.0, -4.0]);
        assert!(n < 1e-9);
        let s = vim_score(&[0.0, 0.0], 0.0 * n, false);
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn log_odds_matches_probability() {
        for (logits, v) in [(vec![0.0_f64, 0.0], 0.0), (vec![1.0, -2.0, 3.0], 2.5), (vec![-5.0], -4.0)] {
            let p = vim_score(&logits, v, false);
            let lo = vim_log_odds(&logits, v, false);
            assert!((lo - (p / (1.0 - p)).ln()).abs() < 1e-12);
        }
        assert_eq!(vim_log_odds(&[0.0_f64, 0.0], 0.0, false), -(2.0_f64.ln()));
        assert!(vim_log_odds(&[-900.0_f64], 900.0, false).is_finite());
    }

    #[test]
    fn negative_logits_shifted_to_positive_alpha() {
        let logits = [vec![-3.0_f64, -10.0], vec![-12.0, -4.0]];
        let rows: Vec<&[f64]> = logits.iter().map(Vec::as_slice).collect();
        assert_eq!(logit_shift(&rows), 12.0);
        let positive = [vec![3.0_f64, -10.0], vec![1.0, 4.0]];
        let rows: Vec<&[f64]> = positive.iter().map(Vec::as_slice).collect();
        assert_eq!(logit_shift(&rows), 0.0);

        let mut pca = PcaModel::fit(&[&[0.0_f64, 1.0][..], &[1.0, 0.0], &[2.0, 2.0]], 1);
        pca.calibrate(logits.iter().map(Vec::as_slice), &[1.0, 3.0]);
        assert!((pca.alpha - (9.0 + 8.0) / 2.0 / 2.0).abs() < 1e-12);
        assert!(pca.score(&[-3.0, -10.0], 2.0, false) < pca.score(&[-3.0, -10.0], 3.0, false));
    }

    #[test]
    fn overwrite_replaces_last_logit() {
        let a = vim_score(&[1.0_f64, 2.0, 50.0], 2.0, true);
        let b = vim_score(&[1.0_f64, 2.0], 2.0, false);
        assert_eq!(a, b);
        assert!(vim_score(&[1.0_f64, 2.0, 50.0], 2.0, false) < 1e-20);
    }
}
