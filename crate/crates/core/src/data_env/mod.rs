//! Synthetic tasks and the budgeted acquisition environment.

mod env;
mod mask;
mod task;

pub use env::{
    prediction_reward, reconstruction_mse, AcquisitionEnv, EpisodeConfig, PartialState,
    Prediction, PredictionLoss, RewardSign, TaskKind,
};
pub use mask::ObservationMask;
pub use task::{ar1_covariance, Dataset, Instance, SyntheticTaskSpec};

use crate::config::ConfigError;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("feature {0} is already observed")]
    AlreadyObserved(usize),
    #[error("feature {feature} outside 0..{dim}")]
    FeatureOutOfRange { feature: usize, dim: usize },
    #[error("acquisition budget {budget} already spent")]
    BudgetExceeded { budget: usize },
    #[error("final reward requested after {steps} of {budget} acquisitions")]
    BudgetNotExhausted { steps: usize, budget: usize },
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("prediction shape: {0}")]
    PredictionShape(String),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("covariance of class {class} is not positive definite")]
    NotPositiveDefinite { class: usize },
    #[error("covariance of class {class} is not symmetric")]
    NotSymmetric { class: usize },
    #[error("invalid priors: {0}")]
    Priors(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl PartialEq for TaskError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}
