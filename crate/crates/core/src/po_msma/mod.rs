//! Partially observed OOD detection from multi-scale score norms.

mod detector;
mod dose;
mod persist;
mod schedule;
mod score;

pub use detector::{
    auroc, calibrate, sample_pairs, train_detector, train_dose, BucketStats, Calibration, DetectorRewardForm,
    DetectorTrainConfig, PoMsmaDetector,
};
pub use dose::{DoseModel, DoseTrainConfig, VARIANCE_FLOOR};
pub use schedule::NoiseSchedule;
pub use score::{
    analytic_gaussian_score, masked_score, summary_statistics, AnalyticGaussianScore, MaskDistribution,
    MlpScoreModel, ScoreFunction, ScoreTrainConfig, ScoreTrainReport, Standardizer,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoMsmaError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("analytic score needs a single Gaussian, task has {0} classes")]
    NotGaussian(usize),
    #[error("training data is empty")]
    EmptyData,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("shape: {0}")]
    Shape(String),
}
