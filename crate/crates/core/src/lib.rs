//! Class-localized feature residuals for out-of-distribution detection.
//!
//! Penultimate-layer feature vectors are standardized, paired with the train
//! vectors of each known class, and the resulting residual statistics are
//! scored by one of six detector families. Per-class scores are turned into
//! OOD decisions by voting or by a KDE-based probability, then evaluated.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix it to `f64`.

pub mod decision;
pub mod detectors;
pub mod eval;
pub mod experiment;
pub mod kde;
pub mod linalg;
pub mod residual;
pub mod scalar;
pub mod stats;
pub mod store;
pub mod synth;
pub mod weibull;

pub use decision::{DecisionConfig, DecisionModel, ProbForm};
pub use detectors::{
    Aggregation, Base, DetectorError, DetectorParams, DetectorSpec, Family, FittedDetector,
    KnnMetric, LocalScores, Observation,
};
pub use eval::{EvalReport, Truth};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentError};
pub use residual::{ResidualKind, SamplingPolicy};
pub use scalar::Real;
pub use store::{load_dataset, save_dataset, FeatureDataset, FeatureSample, Manifest, Split};
pub use synth::{synthesize, SynthSpec};

pub type Spfv64 = residual::Spfv<f64>;
pub type Residual64 = residual::ResidualVector<f64>;
pub type Observation64 = Observation<f64>;
pub type Detector64 = FittedDetector<f64>;
pub type LocalScores64 = LocalScores<f64>;
pub type DecisionModel64 = DecisionModel<f64>;
pub type KdeModel64 = kde::KdeModel<f64>;
pub type WeibullModel64 = weibull::WeibullModel<f64>;

pub type Spfv32 = residual::Spfv<f32>;
pub type Detector32 = FittedDetector<f32>;
