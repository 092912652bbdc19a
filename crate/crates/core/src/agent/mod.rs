//! Hierarchical actor-critic acquisition policy trained with a clipped
//! surrogate objective.
//!
//! The actor emits `K` group logits and `K × N` member logits; acquired
//! groups and members are masked before each softmax, so the decoded
//! feature is always unobserved. The critic is a separate network over the
//! same fixed-length input.

mod policy;
mod ppo;

pub use policy::{
    feature_width, masked_log_softmax, policy_features, ActMode, ActionDistribution, HierarchicalAction,
    PolicyNetwork,
};
pub use ppo::{
    build_samples, clipped_surrogate, collect_rollouts, AgentTrainer, RlPolicy, Sample, TrainConfig, Trajectory,
    TrajectoryStep, UpdateStats,
};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data_env::{PartialState, Prediction, TaskKind};
use crate::dynamics::GaussianMixtureOracle;
use crate::grouping::ActionGrouping;
use crate::harness::HarnessError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no unobserved feature is left to acquire")]
    NoValidAction,
    #[error("policy produced non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite loss at update {update}{}", dump.as_ref().map(|p| format!(", batch written to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { update: usize, dump: Option<PathBuf> },
    #[error("update called without trajectories")]
    EmptyBatch,
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Terminal prediction, delegated to the dynamics model.
pub fn predict_final(
    oracle: &GaussianMixtureOracle,
    state: &PartialState,
    task: TaskKind,
) -> Result<Prediction, HarnessError> {
    Ok(oracle.predict(state.values(), state.mask(), task)?)
}

impl PolicyNetwork {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("policy");
        ck.set("classes", self.classes);
        ck.set("grouping.groups", self.grouping.num_groups());
        for (k, g) in self.grouping.groups().iter().enumerate() {
            let members: Vec<String> = g.iter().map(|f| f.to_string()).collect();
            ck.set(&format!("grouping.group.{k}"), members.join(","));
        }
        ck.set_array("grouping.scores", self.grouping.scores());
        ck.put_mlp("actor", &self.actor);
        ck.put_mlp("critic", &self.critic);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AgentError> {
        ck.expect_kind("policy")?;
        let classes: usize = ck.parse("classes")?;
        let k: usize = ck.parse("grouping.groups")?;
        let groups = (0..k).map(|i| ck.list::<usize>(&format!("grouping.group.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let scores = ck.array("grouping.scores")?.to_vec();
        let grouping = ActionGrouping::from_groups(groups, scores).map_err(|e| AgentError::Shape(e.to_string()))?;
        PolicyNetwork::from_parts(ck.take_mlp("actor")?, ck.take_mlp("critic")?, grouping, classes)
    }
}
