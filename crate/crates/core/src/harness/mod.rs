//! End-to-end episodes, baseline policies, evaluation and metrics.

mod eval;
mod experiment;
mod metrics;

pub use eval::{
    evaluate_policy, greedy_policy_eval, ood_eval, random_policy_eval, EvalSummary, OodReport,
};
pub use experiment::{
    build_grouping, detector_reward_label, evaluate_budget, ood_dataset, prepare_data, train_agent, train_and_evaluate,
    train_dose, train_score, write_outputs, DetectorRewardSetting, ExperimentConfig, ExperimentOutput, OodKind,
    PolicyKind, KNOWN_KEYS,
};
pub use metrics::{summarize, write_metrics_csv, write_metrics_jsonl, write_summary_csv, MetricsRecord, SummaryRow};

use crate::data_env::{
    AcquisitionEnv, EnvError, EpisodeConfig, Instance, PartialState, Prediction, TaskKind,
};
use crate::dynamics::{AuxiliaryInfo, DynamicsError, GaussianMixtureOracle};
use crate::math;
use crate::po_msma::{DetectorRewardForm, PoMsmaDetector};
use crate::rng::Rng;
use rand::seq::SliceRandom;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("policy: {0}")]
    Policy(String),
    #[error("detector reward is enabled but no detector was supplied")]
    MissingDetector,
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// What a policy sees at decision time.
pub struct StepContext<'a> {
    pub state: &'a PartialState,
    pub aux: Option<&'a AuxiliaryInfo>,
    pub oracle: &'a GaussianMixtureOracle,
}

/// A policy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub feature: usize,
    /// `(group, member)` for hierarchical policies.
    pub action: Option<(usize, usize)>,
    pub log_prob: f64,
    pub value: f64,
    /// Per-feature scores the choice was based on, when the policy has them.
    pub utilities: Option<Vec<f64>>,
}

impl Choice {
    pub fn plain(feature: usize) -> Self {
        Choice { feature, action: None, log_prob: 0.0, value: 0.0, utilities: None }
    }
}

pub trait AcquisitionPolicy {
    fn name(&self) -> &str;

    /// Whether the policy reads the auxiliary information (skipped otherwise).
    fn needs_aux(&self) -> bool {
        true
    }

    fn choose(&mut self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<Choice, HarnessError>;
}

/// Uniformly random unobserved feature.
#[derive(Debug, Clone, Default)]
pub struct RandomPolicy;

impl AcquisitionPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn needs_aux(&self) -> bool {
        false
    }

    fn choose(&mut self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<Choice, HarnessError> {
        let u = ctx.state.mask().unobserved();
        let f = *u.choose(rng).ok_or_else(|| HarnessError::Policy("no unobserved feature left".into()))?;
        Ok(Choice { log_prob: -(u.len() as f64).ln(), ..Choice::plain(f) })
    }
}

/// Acquire the feature with the largest expected KL utility; ties to the lowest index.
#[derive(Debug, Clone, Default)]
pub struct GreedyPolicy;

impl AcquisitionPolicy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn needs_aux(&self) -> bool {
        false
    }

    fn choose(&mut self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<Choice, HarnessError> {
        let state = ctx.state;
        let util = ctx.oracle.greedy_utilities(state.values(), state.mask(), rng)?;
        let mut best: Option<usize> = None;
        for j in state.mask().unobserved() {
            if best.map_or(true, |b| util[j] > util[b]) {
                best = Some(j);
            }
        }
        let f = best.ok_or_else(|| HarnessError::Policy("no unobserved feature left".into()))?;
        Ok(Choice { utilities: Some(util), ..Choice::plain(f) })
    }
}

/// Shared, frozen components of an episode.
#[derive(Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub oracle: &'a GaussianMixtureOracle,
    /// Needed when the detector reward is on or OOD log-probs are wanted.
    pub detector: Option<&'a PoMsmaDetector>,
    pub reward_form: DetectorRewardForm,
    pub config: &'a EpisodeConfig,
}

impl<'a> EpisodeContext<'a> {
    pub fn new(oracle: &'a GaussianMixtureOracle, config: &'a EpisodeConfig) -> Self {
        EpisodeContext { oracle, detector: None, reward_form: DetectorRewardForm::Standardized, config }
    }

    pub fn with_detector(mut self, detector: &'a PoMsmaDetector) -> Self {
        self.detector = Some(detector);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub state: PartialState,
    pub aux: Option<AuxiliaryInfo>,
    pub choice: Choice,
    /// `r_e`
    pub env_reward: f64,
    /// `r_m`
    pub model_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub final_state: PartialState,
    pub prediction: Prediction,
    /// `r_p`
    pub prediction_reward: f64,
    /// `r_d` (0 when disabled)
    pub detector_reward: f64,
    /// Terminal-mask DoSE log-likelihood, when a detector is present.
    pub ood_log_prob: Option<f64>,
    /// Accumulated while running.
    pub total_reward: f64,
    pub label: usize,
}

impl EpisodeTrace {
    /// `Σ(r_e + r_m) + r_p + r_d` recomputed from the records.
    pub fn recomputed_total(&self) -> f64 {
        self.steps.iter().map(|s| s.env_reward + s.model_reward).sum::<f64>()
            + self.prediction_reward
            + self.detector_reward
    }

    /// Per-step rewards, terminal components folded into the last step.
    pub fn step_rewards(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.steps.iter().map(|s| s.env_reward + s.model_reward).collect();
        if let Some(last) = r.last_mut() {
            *last += self.prediction_reward + self.detector_reward;
        }
        r
    }

    pub fn acquired(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.choice.feature).collect()
    }

    pub fn correct(&self) -> Option<bool> {
        match &self.prediction {
            Prediction::Class { label, .. } => Some(*label == self.label),
            Prediction::Reconstruction(_) => None,
        }
    }
}

/// One pass of the acquisition loop followed by prediction and detector scoring.
pub fn run_episode(
    ctx: &EpisodeContext<'_>,
    instance: &Instance,
    policy: &mut dyn AcquisitionPolicy,
    rng: &mut Rng,
) -> Result<EpisodeTrace, HarnessError> {
    let config = ctx.config;
    if config.detector_beta.is_some() && ctx.detector.is_none() {
        return Err(HarnessError::MissingDetector);
    }
    let mut env = AcquisitionEnv::reset(instance, config)?;
    let mut steps = Vec::with_capacity(config.budget);
    let mut total = 0.0;
    while !env.budget_exhausted() {
        let state = env.state().clone();
        let aux = if policy.needs_aux() {
            Some(ctx.oracle.query(state.values(), state.mask(), rng)?)
        } else {
            None
        };
        let choice = policy.choose(&StepContext { state: &state, aux: aux.as_ref(), oracle: ctx.oracle }, rng)?;
        if state.mask().is_observed(choice.feature) {
            return Err(HarnessError::Policy(format!("{} chose observed feature {}", policy.name(), choice.feature)));
        }
        let env_reward = env.step(choice.feature)?;
        let model_reward = match config.task {
            TaskKind::Classification => ctx.oracle.intermediate_reward(&state, env.state(), choice.feature)?,
            TaskKind::Reconstruction => {
                ctx.oracle.air_intermediate_reward(&instance.x, state.mask(), choice.feature)?
            }
        };
        total += env_reward + model_reward;
        steps.push(TraceStep { state, aux, choice, env_reward, model_reward });
    }
    let final_state = env.state().clone();
    let prediction = crate::agent::predict_final(ctx.oracle, &final_state, config.task)?;
    let prediction_reward = env.final_reward(&prediction)?;
    total += prediction_reward;
    let ood_log_prob = ctx.detector.map(|d| d.log_prob(final_state.values(), final_state.mask()));
    let detector_reward = match (config.detector_beta, ctx.detector, ood_log_prob) {
        (Some(beta), Some(d), Some(lp)) => {
            d.reward_from_log_prob(lp, final_state.mask().count(), config.detector_sign, beta, ctx.reward_form)
        }
        _ => 0.0,
    };
    total += detector_reward;
    Ok(EpisodeTrace {
        steps,
        final_state,
        prediction,
        prediction_reward,
        detector_reward,
        ood_log_prob,
        total_reward: total,
        label: instance.y,
    })
}

/// Mean of `values`, 0 for an empty slice.
pub(crate) fn mean_or_zero(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        math::mean(values)
    }
}
