//! Weibull tail models over distances to a class centre.

use serde::{Deserialize, Serialize};

use crate::scalar::{sq_dist, Real};
use crate::weibull::WeibullModel;

pub const MAX_DEFAULT_TAIL: usize = 20;

/// `min(20, ceil(n / 2))`, never below 2.
pub fn default_tail(class_size: usize) -> usize {
    class_size.div_ceil(2).clamp(2, MAX_DEFAULT_TAIL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxModel<T> {
    /// Mean activation vector (feature base only).
    pub center: Option<Vec<T>>,
    pub weibull: WeibullModel<T>,
}

impl<T: Real> OpenMaxModel<T> {
    /// Unknown-probability of a raw distance or score.
    pub fn score(&self, x: T) -> T {
        self.weibull.cdf(x)
    }

    /// Euclidean distance to the centre. Panics without a centre.
    pub fn distance(&self, features: &[T]) -> T {
        let c = self.center.as_ref().expect("feature-base model has a centre");
        sq_dist(features, c).sqrt()
    }
}
