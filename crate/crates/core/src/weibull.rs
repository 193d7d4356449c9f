//! Two-parameter Weibull (with a fixed location shift) fitted by maximum
//! likelihood.
//!
//! With the shift removed, the MLE scale is `λ = (mean xᵏ)^{1/k}` and the
//! shape solves the profile equation
//!
//! ```text
//! g(k) = Σ xᵏ ln x / Σ xᵏ - 1/k - mean(ln x) = 0
//! ```
//!
//! `g` is strictly increasing, so a bracketed Newton iteration with
//! bisection fallback converges from any bracket.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-10;
const SHAPE_CEILING: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum WeibullError {
    #[error("weibull fit needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("weibull fit needs finite samples above the shift")]
    OutOfSupport,
    #[error("all tail samples are equal; shape is unbounded")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel<T> {
    pub shape: T,
    pub scale: T,
    pub shift: T,
    pub tail_size: usize,
}

impl<T: Real> WeibullModel<T> {
    /// `1 - exp(-((x - shift)/scale)^shape)`, zero at or below the shift.
    pub fn cdf(&self, x: T) -> T {
        if x <= self.shift {
            return T::zero();
        }
        let z = (x - self.shift) / self.scale;
        -(-(z.powf(self.shape))).exp_m1()
    }

    /// MLE on every sample, measured from `shift`.
    pub fn fit(samples: &[T], shift: T) -> Result<Self, WeibullError> {
        if samples.len() < 2 {
            return Err(WeibullError::TooFewSamples(samples.len()));
        }
        let shifted: Vec<T> = samples.iter().map(|&x| x - shift).collect();
        if shifted.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
            return Err(WeibullError::OutOfSupport);
        }
        let top = shifted.iter().copied().fold(T::zero(), T::max);
        // Work on x / max so that xᵏ stays in [0, 1] for any shape.
        let logs: Vec<T> = shifted.iter().map(|&x| (x / top).ln()).collect();
        if logs.iter().all(|&l| (l - logs[0]).abs() <= T::epsilon()) {
            return Err(WeibullError::Degenerate);
        }
        let n = T::of_usize(logs.len());
        let mean_log = logs.iter().copied().sum::<T>() / n;

        // Returns g(k) and g'(k).
        let profile = |k: T| -> (T, T) {
            let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
            for &l in &logs {
                let w = (k * l).exp();
                s0 += w;
                s1 += w * l;
                s2 += w * l * l;
            }
            let m1 = s1 / s0;
            let g = m1 - k.recip() - mean_log;
            let dg = s2 / s0 - m1 * m1 + (k * k).recip();
            (g, dg)
        };

        let mut lo = T::lit(1e-3);
        while profile(lo).0 > T::zero() {
            lo *= T::lit(0.1);
        }
        let mut hi = T::one();
        while profile(hi).0 < T::zero() {
            hi *= T::lit(2.0);
            if hi > T::lit(SHAPE_CEILING) {
                return Err(WeibullError::Degenerate);
            }
        }

        let tol = T::lit(TOLERANCE);
        let mut k = (lo + hi) / T::lit(2.0);
        for _ in 0..MAX_ITERATIONS {
            let (g, dg) = profile(k);
            if g == T::zero() {
                break;
            }
            if g < T::zero() {
                lo = k;
            } else {
                hi = k;
            }
            let newton = k - g / dg;
            let next = if dg > T::zero() && newton > lo && newton < hi {
                newton
            } else {
                (lo + hi) / T::lit(2.0)
            };
            let done = (next - k).abs() <= tol * k.max(T::one());
            k = next;
            if done || hi - lo <= tol * k {
                break;
            }
        }

        let mean_pow = logs.iter().map(|&l| (k * l).exp()).sum::<T>() / n;
        let scale = top * mean_pow.powf(k.recip());
        Ok(Self {
            shape: k,
            scale,
            shift,
            tail_size: samples.len(),
        })
    }

    /// MLE on the `tail_size` largest values. The shift is 0 for strictly
    /// positive tails, otherwise just below the smallest tail value.
    pub fn fit_tail(values: &[T], tail_size: usize) -> Result<Self, WeibullError> {
        if tail_size < 2 || values.len() < tail_size {
            return Err(WeibullError::TooFewSamples(values.len().min(tail_size)));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
        let tail = &sorted[..tail_size];
        let low = tail[tail_size - 1];
        let shift = if low > T::zero() {
            T::zero()
        } else {
            let span = (tail[0] - low).max(T::one());
            low - span * T::lit(1e-6)
        };
        Self::fit(tail, shift)
    }
}
