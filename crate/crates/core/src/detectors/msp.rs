//! Maximum softmax probability baseline.

use crate::scalar::Real;

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - top).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `1 - max softmax(logits)`, evaluated as the softmax mass outside the
/// arg-max so that confident logits do not cancel to zero.
pub fn msp_score<T: Real>(logits: &[T]) -> T {
    let (arg, top) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (i, l)| if l > acc.1 { (i, l) } else { acc });
    let mut rest = T::zero();
    for (i, &l) in logits.iter().enumerate() {
        if i != arg {
            rest += (l - top).exp();
        }
    }
    rest / (T::one() + rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_confident() {
        assert_eq!(msp_score(&[0.0_f64, 0.0]), 0.5);
        let expected = 1.0 - 1.0 / (1.0 + (-10.0_f64).exp());
        assert!((msp_score(&[10.0_f64, 0.0]) - expected).abs() < 1e-15);
        assert!(msp_score(&[1e4_f64, 0.0, -3.0]) < 1e-300);
        assert!((msp_score(&[1.0_f32, 2.0, 3.0]) - (1.0 - softmax(&[1.0_f32, 2.0, 3.0])[2])).abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[-700.0_f64, -710.0, -690.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[2] > p[0] && p[0] > p[1]);
    }
}
