//! Arbitrary-conditional surrogate: posteriors, entropies, information gains,
//! imputations and the per-step rewards built from them.

mod channel;
mod oracle;

pub use channel::BinarySymmetricChannel;
pub use oracle::{Conditioned, GaussianMixtureOracle};

use crate::data_env::{Instance, ObservationMask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("candidate feature {0} is already observed")]
    AlreadyObserved(usize),
    #[error("states do not differ by exactly feature {0}")]
    StateMismatch(usize),
    #[error("observed values must be finite")]
    NonFinite,
    #[error("covariance block is singular")]
    Singular,
    #[error("shape: {0}")]
    Shape(String),
}

/// Side information handed to the policy at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryInfo {
    /// `p(y | x_o)`.
    pub posterior: Vec<f64>,
    pub prediction: usize,
    /// Expected information gain per feature; 0 on observed positions.
    pub utilities: Vec<f64>,
    /// Imputed mean per feature; 0 on observed positions.
    pub imputed_mean: Vec<f64>,
    /// Imputed variance per feature; 0 on observed positions.
    pub imputed_var: Vec<f64>,
}

/// Anything that yields a class posterior from a partial observation.
pub trait PosteriorModel {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    /// `ln p(y | x_o)`; `values` has length `d` and is read only on observed positions.
    fn log_posterior(&self, values: &[f64], mask: &ObservationMask) -> Result<Vec<f64>, DynamicsError>;
}

/// Plug-in estimate of `I(x_i; y)` as the mean of `ln p(y|x_i) - ln p(y)` over `rows`.
pub fn estimate_mi<M: PosteriorModel + ?Sized>(
    model: &M,
    rows: &[Instance],
    feature: usize,
) -> Result<f64, DynamicsError> {
    let d = model.dim();
    if feature >= d {
        return Err(DynamicsError::Shape(format!("feature {feature} outside 0..{d}")));
    }
    if rows.is_empty() {
        return Err(DynamicsError::Shape("validation set is empty".into()));
    }
    let prior = model.log_posterior(&vec![0.0; d], &ObservationMask::empty(d))?;
    let mask = ObservationMask::from_indices(d, &[feature]).map_err(|e| DynamicsError::Shape(e.to_string()))?;
    let mut values = vec![0.0; d];
    let mut acc = 0.0;
    for row in rows {
        if row.x.len() != d || row.y >= prior.len() {
            return Err(DynamicsError::Shape("validation row does not match the model".into()));
        }
        values[feature] = row.x[feature];
        let lp = model.log_posterior(&values, &mask)?;
        acc += lp[row.y] - prior[row.y];
    }
    Ok(acc / rows.len() as f64)
}

/// MI estimates for every feature.
pub fn estimate_all_mi<M: PosteriorModel + ?Sized>(model: &M, rows: &[Instance]) -> Result<Vec<f64>, DynamicsError> {
    (0..model.dim()).map(|i| estimate_mi(model, rows, i)).collect()
}
