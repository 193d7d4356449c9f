//! Synthetic isotropic Gaussian class clusters standing in for real
//! penultimate features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{FeatureDataset, FeatureSample, Manifest, Split, StoreError};

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_known: usize,
    pub num_unknown: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    /// Minimum pairwise distance between class means, in units of `within_std`.
    pub mean_separation: f64,
    pub within_std: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(
        "cannot place {classes} means {separation} apart in dimension {dim} after {attempts} attempts"
    )]
    InfeasibleSeparation {
        classes: usize,
        dim: usize,
        separation: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.num_known < 2 {
            return bad("num_known must be >= 2");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.per_class_train < 2 || self.per_class_test < 2 {
            return bad("per-class counts must be >= 2");
        }
        if !(self.mean_separation >= 0.0) || !self.mean_separation.is_finite() {
            return bad("mean_separation must be finite and >= 0");
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return bad("within_std must be finite and > 0");
        }
        Ok(())
    }

    pub fn known_label(i: usize) -> String {
        format!("k{i}")
    }

    pub fn unknown_label(i: usize) -> String {
        format!("u{i}")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn min_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Places `n` means with pairwise distance >= `target`.
///
/// With `n <= dim` the means are a randomly rotated orthonormal frame scaled
/// by `target` (all pairwise distances equal `√2 · target`). Otherwise random
/// points on the sphere of radius `target` are drawn and accepted only when
/// every pair clears the target.
fn place_means(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    target: f64,
) -> Result<Vec<Vec<f64>>, SynthError> {
    if target == 0.0 {
        return Ok(vec![vec![0.0; dim]; n]);
    }
    let slack = 1.0 - 1e-9;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let means = if n <= dim {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
            while basis.len() < n {
                let mut v = gaussian(rng, dim);
                for b in &basis {
                    let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    basis.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            basis
                .into_iter()
                .map(|b| b.into_iter().map(|x| x * target).collect())
                .collect()
        } else {
            (0..n)
                .map(|_| {
                    let v = gaussian(rng, dim);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x * target / norm).collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };
        if n < 2 || min_pairwise(&means) >= target * slack {
            return Ok(means);
        }
    }
    Err(SynthError::InfeasibleSeparation {
        classes: n,
        dim,
        separation: target,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

/// Generates a labeled dataset: known classes get train and test samples,
/// unknown classes test samples only. Logits are `-‖x - μ_k‖²` over the
/// known-class means, a surrogate classifier head.
pub fn synthesize(spec: &SynthSpec) -> Result<FeatureDataset, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.num_known + spec.num_unknown;
    let means = place_means(
        &mut rng,
        total,
        spec.dim,
        spec.mean_separation * spec.within_std,
    )?;

    let known: Vec<String> = (0..spec.num_known).map(SynthSpec::known_label).collect();
    let unknown: Vec<String> = (0..spec.num_unknown).map(SynthSpec::unknown_label).collect();
    let class_names: Vec<String> = known.iter().chain(&unknown).cloned().collect();

    let logits_for = |x: &[f64]| -> Vec<f64> {
        means[..spec.num_known]
            .iter()
            .map(|mu| -x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect()
    };

    let mut samples = Vec::new();
    for (c, label) in class_names.iter().enumerate() {
        let is_known = c < spec.num_known;
        let splits: &[(Split, usize)] = if is_known {
            &[(Split::Train, spec.per_class_train), (Split::Test, spec.per_class_test)]
        } else {
            &[(Split::Test, spec.per_class_test)]
        };
        for &(split, count) in splits {
            for i in 0..count {
                let noise = gaussian(&mut rng, spec.dim);
                let features: Vec<f64> = means[c]
                    .iter()
                    .zip(noise)
                    .map(|(m, z)| m + spec.within_std * z)
                    .collect();
                samples.push(FeatureSample {
                    sample_id: format!("{label}-{}-{i:04}", split.as_str()),
                    label: label.clone(),
                    split,
                    logits: Some(logits_for(&features)),
                    features,
                });
            }
        }
    }

    let manifest = Manifest {
        class_names,
        known_labels: known,
        feature_dim: spec.dim,
        logit_dim: Some(spec.num_known),
        seed: Some(spec.seed),
        provenance: format!(
            "synthetic isotropic Gaussian clusters: {} known, {} unknown, separation {} x std {}",
            spec.num_known, spec.num_unknown, spec.mean_separation, spec.within_std
        ),
    };
    Ok(FeatureDataset::new(manifest, samples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SynthSpec {
        SynthSpec {
            num_known: 2,
            num_unknown: 1,
            dim: 8,
            per_class_train: 5,
            per_class_test: 5,
            mean_separation: 10.0,
            within_std: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn counts_match_spec() {
        let ds = synthesize(&small()).unwrap();
        assert_eq!(ds.split(Split::Train).count(), 10);
        assert_eq!(ds.split(Split::Test).count(), 15);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
        let mut other = small();
        other.seed = 8;
        assert_ne!(synthesize(&small()).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn label_bookkeeping() {
        let ds = synthesize(&small()).unwrap();
        let train: BTreeSet<_> = ds.split(Split::Train).map(|s| s.label.clone()).collect();
        assert_eq!(train, ["k0", "k1"].iter().map(|s| s.to_string()).collect());
        assert!(ds
            .samples()
            .iter()
            .filter(|s| s.label.starts_with('u'))
            .all(|s| s.split == Split::Test));
    }

    #[test]
    fn means_clear_separation_in_both_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = place_means(&mut rng, 5, 8, 4.0).unwrap();
        assert!((min_pairwise(&frame) - 4.0 * std::f64::consts::SQRT_2).abs() < 1e-9);
        let sphere = place_means(&mut rng, 10, 8, 1.0).unwrap();
        assert!(min_pairwise(&sphere) >= 1.0 - 1e-9);
    }

    #[test]
    fn too_tight_separation_is_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            place_means(&mut rng, 40, 2, 1.0),
            Err(SynthError::InfeasibleSeparation { .. })
        ));
    }

    #[test]
    fn surrogate_logits_peak_at_own_class() {
        let ds = synthesize(&small()).unwrap();
        let correct = ds
            .split(Split::Train)
            .filter(|s| {
                let l = s.logits.as_ref().unwrap();
                let best = if l[0] >= l[1] { "k0" } else { "k1" };
                best == s.label
            })
            .count();
        assert_eq!(correct, 10);
    }
}
