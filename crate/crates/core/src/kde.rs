//! One-dimensional Epanechnikov kernel density estimate with a closed-form
//! CDF.

use thiserror::Error;

use crate::scalar::Real;

/// Minimum sample size accepted by [`KdeModel::fit`].
pub const MIN_POINTS: usize = 5;
/// Bandwidth multiplier of the rule of thumb `B = 2.345 σ̂ n^{-1/5}`.
pub const BANDWIDTH_FACTOR: f64 = 2.345;
const GRID_SIZE: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum KdeError {
    #[error("kernel density needs at least {need} points, got {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("non-finite sample value")]
    NonFinite,
    #[error("bandwidth must be positive and finite")]
    BadBandwidth,
}

/// `K(u) = 3/4 (1 - u²)` on `|u| <= 1`, zero elsewhere.
pub fn epanechnikov<T: Real>(u: T) -> T {
    if u.abs() <= T::one() {
        T::lit(0.75) * (T::one() - u * u)
    } else {
        T::zero()
    }
}

/// Integral of the kernel from -1 to `u`: `(1 + u)² (2 - u) / 4`.
pub fn epanechnikov_cdf<T: Real>(u: T) -> T {
    let one = T::one();
    let four = T::lit(4.0);
    if u <= -one {
        T::zero()
    } else if u >= one {
        one
    } else if u <= T::zero() {
        (one + u) * (one + u) * (T::lit(2.0) - u) / four
    } else {
        one - (one - u) * (one - u) * (T::lit(2.0) + u) / four
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel<T> {
    points: Vec<T>,
    bandwidth: T,
    degenerate: bool,
    grid: Vec<(T, T)>,
}

impl<T: Real> KdeModel<T> {
    /// Fits with the rule-of-thumb bandwidth. When every point is equal the
    /// model degrades to a step CDF at that value and is flagged degenerate.
    pub fn fit(points: &[T]) -> Result<Self, KdeError> {
        if points.len() < MIN_POINTS {
            return Err(KdeError::TooFewPoints {
                have: points.len(),
                need: MIN_POINTS,
            });
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(KdeError::NonFinite);
        }
        let n = T::of_usize(points.len());
        let mean = points.iter().copied().sum::<T>() / n;
        let var = points
            .iter()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<T>()
            / (n - T::one());
        let sd = var.sqrt();
        let bandwidth = T::lit(BANDWIDTH_FACTOR) * sd * n.powf(T::lit(-0.2));
        if !(bandwidth > T::zero()) {
            let mut model = Self::build(points, T::one(), true);
            model.grid.clear();
            return Ok(model);
        }
        Self::with_bandwidth(points, bandwidth)
    }

    pub fn with_bandwidth(points: &[T], bandwidth: T) -> Result<Self, KdeError> {
        if points.is_empty() {
            return Err(KdeError::TooFewPoints {
                have: 0,
                need: 1,
            });
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(KdeError::NonFinite);
        }
        if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
            return Err(KdeError::BadBandwidth);
        }
        Ok(Self::build(points, bandwidth, false))
    }

    fn build(points: &[T], bandwidth: T, degenerate: bool) -> Self {
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mut model = Self {
            points: sorted,
            bandwidth,
            degenerate,
            grid: Vec::new(),
        };
        if !degenerate {
            let (lo, hi) = model.support();
            let step = (hi - lo) / T::of_usize(GRID_SIZE - 1);
            model.grid = (0..GRID_SIZE)
                .map(|i| {
                    let x = if i == GRID_SIZE - 1 {
                        hi
                    } else {
                        lo + step * T::of_usize(i)
                    };
                    (x, model.cdf(x))
                })
                .collect();
        }
        model
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Interval outside of which the density is zero.
    pub fn support(&self) -> (T, T) {
        let lo = self.points[0];
        let hi = self.points[self.points.len() - 1];
        if self.degenerate {
            (lo, hi)
        } else {
            (lo - self.bandwidth, hi + self.bandwidth)
        }
    }

    /// `ĥ(x) = 1/(n B) Σ K((x - x_i)/B)`. Zero everywhere for a degenerate
    /// (step) model.
    pub fn density(&self, x: T) -> T {
        if self.degenerate {
            return T::zero();
        }
        let (start, end) = self.window(x);
        let b = self.bandwidth;
        let sum: T = self.points[start..end]
            .iter()
            .map(|&p| epanechnikov((x - p) / b))
            .sum();
        sum / (T::of_usize(self.points.len()) * b)
    }

    /// Exact CDF by summing the closed-form kernel integrals.
    pub fn cdf(&self, x: T) -> T {
        let n = T::of_usize(self.points.len());
        if self.degenerate {
            let below = self.points.partition_point(|&p| p <= x);
            return T::of_usize(below) / n;
        }
        let (start, end) = self.window(x);
        let b = self.bandwidth;
        let partial: T = self.points[start..end]
            .iter()
            .map(|&p| epanechnikov_cdf((x - p) / b))
            .sum();
        ((T::of_usize(start) + partial) / n).min(T::one())
    }

    /// CDF by linear interpolation on the cached grid.
    pub fn cdf_interpolated(&self, x: T) -> T {
        if self.grid.is_empty() {
            return self.cdf(x);
        }
        let (lo, _) = self.grid[0];
        let (hi, _) = self.grid[self.grid.len() - 1];
        if x <= lo {
            return T::zero();
        }
        if x >= hi {
            return T::one();
        }
        let idx = self.grid.partition_point(|&(g, _)| g <= x);
        let (x0, c0) = self.grid[idx - 1];
        let (x1, c1) = self.grid[idx];
        c0 + (c1 - c0) * (x - x0) / (x1 - x0)
    }

    /// Points whose kernel is partially active at `x`: `[start, end)`.
    /// Points before `start` lie entirely below `x`.
    fn window(&self, x: T) -> (usize, usize) {
        let b = self.bandwidth;
        let start = self.points.partition_point(|&p| x - p >= b);
        let end = self.points.partition_point(|&p| p - x < b);
        (start, end.max(start))
    }
}
