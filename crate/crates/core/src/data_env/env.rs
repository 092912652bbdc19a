//! The budgeted acquisition MDP.
//!
//! State is the observed index set plus the revealed values. Each step
//! reveals one unobserved feature of the hidden instance and pays
//! `-alpha * cost(i)`; once the budget is spent the episode can be scored.

use super::{EnvError, Instance, ObservationMask};
use serde::{Deserialize, Serialize};

/// `s = [o, x_o]` plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialState {
    mask: ObservationMask,
    /// Length `d`; zero on unobserved positions.
    values: Vec<f64>,
    steps: usize,
}

impl PartialState {
    pub fn empty(dim: usize) -> Self {
        PartialState { mask: ObservationMask::empty(dim), values: vec![0.0; dim], steps: 0 }
    }

    /// State observing `mask` of `x` (test and evaluation helper).
    pub fn observe(x: &[f64], mask: ObservationMask) -> Self {
        let values = mask.apply(x);
        let steps = mask.count();
        PartialState { mask, values, steps }
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    /// `x ⊙ I_m` over all `d` positions.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `x_o` in ascending index order.
    pub fn observed_values(&self) -> Vec<f64> {
        self.mask.observed().into_iter().map(|i| self.values[i]).collect()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionLoss {
    CrossEntropy,
    ZeroOne,
}

/// Sign of the detector reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardSign {
    Positive,
    Negative,
}

impl RewardSign {
    pub fn value(self) -> f64 {
        match self {
            RewardSign::Positive => 1.0,
            RewardSign::Negative => -1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "+1" | "1" | "+" | "pos" | "positive" => Some(RewardSign::Positive),
            "-1" | "-" | "neg" | "negative" => Some(RewardSign::Negative),
            _ => None,
        }
    }
}

/// Per-episode reward and budget settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub budget: usize,
    /// Per-feature acquisition cost `C(i)`.
    pub costs: Vec<f64>,
    /// Cost weight `alpha`.
    pub alpha: f64,
    /// Detector reward weight `beta`; `None` disables the detector reward.
    pub detector_beta: Option<f64>,
    pub detector_sign: RewardSign,
    pub task: TaskKind,
    pub loss: PredictionLoss,
}

impl EpisodeConfig {
    /// Unit costs, `alpha = 0.01`, cross-entropy loss, detector reward off.
    pub fn new(dim: usize, budget: usize, task: TaskKind) -> Self {
        EpisodeConfig {
            budget,
            costs: vec![1.0; dim],
            alpha: 0.01,
            detector_beta: None,
            detector_sign: RewardSign::Positive,
            task,
            loss: PredictionLoss::CrossEntropy,
        }
    }

    pub fn with_detector(mut self, beta: f64, sign: RewardSign) -> Self {
        self.detector_beta = Some(beta);
        self.detector_sign = sign;
        self
    }

    pub fn dim(&self) -> usize {
        self.costs.len()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let d = self.costs.len();
        if self.budget < 1 || self.budget > d {
            return Err(EnvError::InvalidConfig(format!("budget {} outside 1..={d}", self.budget)));
        }
        if self.costs.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            return Err(EnvError::InvalidConfig("costs must be finite and nonnegative".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(EnvError::InvalidConfig("alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Final prediction handed to the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    /// Predicted label with the class distribution it came from.
    Class { label: usize, probs: Vec<f64> },
    /// Full-length reconstruction; only unobserved entries are scored.
    Reconstruction(Vec<f64>),
}

/// One running episode over a hidden instance.
#[derive(Debug, Clone)]
pub struct AcquisitionEnv<'a> {
    instance: &'a Instance,
    config: &'a EpisodeConfig,
    state: PartialState,
}

impl<'a> AcquisitionEnv<'a> {
    /// Start an episode with nothing observed.
    pub fn reset(instance: &'a Instance, config: &'a EpisodeConfig) -> Result<Self, EnvError> {
        config.validate()?;
        if instance.x.len() != config.dim() {
            return Err(EnvError::InvalidConfig(format!(
                "instance has {} features but config covers {}",
                instance.x.len(),
                config.dim()
            )));
        }
        Ok(AcquisitionEnv { instance, config, state: PartialState::empty(config.dim()) })
    }

    pub fn state(&self) -> &PartialState {
        &self.state
    }

    pub fn config(&self) -> &EpisodeConfig {
        self.config
    }

    pub fn instance(&self) -> &Instance {
        self.instance
    }

    pub fn budget_exhausted(&self) -> bool {
        self.state.steps >= self.config.budget
    }

    /// Reveal `feature`; returns `r_e = -alpha * C(feature)`.
    pub fn step(&mut self, feature: usize) -> Result<f64, EnvError> {
        if self.budget_exhausted() {
            return Err(EnvError::BudgetExceeded { budget: self.config.budget });
        }
        self.state.mask.insert(feature)?;
        self.state.values[feature] = self.instance.x[feature];
        self.state.steps += 1;
        Ok(-self.config.alpha * self.config.costs[feature])
    }

    /// `r_p = -L(prediction, truth)`; only valid once the budget is spent.
    pub fn final_reward(&self, prediction: &Prediction) -> Result<f64, EnvError> {
        if !self.budget_exhausted() {
            return Err(EnvError::BudgetNotExhausted {
                steps: self.state.steps,
                budget: self.config.budget,
            });
        }
        prediction_reward(self.instance, self.state.mask(), prediction, self.config.loss)
    }
}

/// Negative prediction loss of `prediction` against `instance` under `mask`.
pub fn prediction_reward(
    instance: &Instance,
    mask: &ObservationMask,
    prediction: &Prediction,
    loss: PredictionLoss,
) -> Result<f64, EnvError> {
    match prediction {
        Prediction::Class { label, probs } => {
            if instance.y >= probs.len() {
                return Err(EnvError::PredictionShape(format!(
                    "label {} outside {} predicted classes",
                    instance.y,
                    probs.len()
                )));
            }
            Ok(match loss {
                PredictionLoss::CrossEntropy => probs[instance.y].max(1e-12).ln(),
                PredictionLoss::ZeroOne => {
                    if *label == instance.y {
                        0.0
                    } else {
                        -1.0
                    }
                }
            })
        }
        Prediction::Reconstruction(xhat) => {
            if xhat.len() != instance.x.len() {
                return Err(EnvError::PredictionShape("reconstruction length must equal d".into()));
            }
            Ok(-reconstruction_mse(&instance.x, xhat, mask))
        }
    }
}

/// Mean squared error over unobserved dimensions (0 when nothing is left).
pub fn reconstruction_mse(x: &[f64], xhat: &[f64], mask: &ObservationMask) -> f64 {
    let u = mask.unobserved();
    if u.is_empty() {
        return 0.0;
    }
    u.iter().map(|&i| (x[i] - xhat[i]).powi(2)).sum::<f64>() / u.len() as f64
}
