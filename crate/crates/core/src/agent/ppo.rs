use super::policy::{policy_features, ActMode, ActionDistribution, PolicyNetwork};
use super::AgentError;
use crate::data_env::{Instance, ObservationMask, PartialState};
use crate::harness::{run_episode, AcquisitionPolicy, Choice, EpisodeContext, HarnessError, StepContext};
use crate::math;
use crate::nn::{Adam, BatchTape};
use crate::rng::{self, Rng};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    /// Episodes collected per update.
    pub episodes_per_batch: usize,
    /// Steps per gradient step.
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub updates: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Where to write the failing batch when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            epochs: 4,
            episodes_per_batch: 64,
            minibatch: 64,
            lr: 3e-4,
            max_grad_norm: 0.5,
            updates: 200,
            hidden: vec![64, 64],
            seed: 0,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.gamma) || !in_unit(self.lambda) {
            return Err(AgentError::Config("gamma and lambda must lie in (0, 1]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(AgentError::Config("clip ratio must be positive".into()));
        }
        if self.epochs == 0 || self.episodes_per_batch == 0 || self.minibatch == 0 {
            return Err(AgentError::Config("epochs, batch and minibatch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(AgentError::Config("learning rate must be positive, entropy weight nonnegative".into()));
        }
        Ok(())
    }
}

/// The learned policy as seen by the episode runner.
pub struct RlPolicy<'a> {
    net: &'a PolicyNetwork,
    mode: ActMode,
}

impl<'a> RlPolicy<'a> {
    pub fn new(net: &'a PolicyNetwork, mode: ActMode) -> Self {
        RlPolicy { net, mode }
    }
}

impl AcquisitionPolicy for RlPolicy<'_> {
    fn name(&self) -> &str {
        match self.mode {
            ActMode::Stochastic => "rl",
            ActMode::Deterministic => "rl-greedy",
        }
    }

    fn choose(&mut self, ctx: &StepContext<'_>, rng: &mut Rng) -> Result<Choice, HarnessError> {
        let aux = ctx.aux.ok_or_else(|| HarnessError::Policy("auxiliary information missing".into()))?;
        let a = self.net.act(ctx.state, aux, self.mode, rng).map_err(|e| HarnessError::Policy(e.to_string()))?;
        Ok(Choice {
            feature: a.feature,
            action: Some((a.group, a.member)),
            log_prob: a.log_prob,
            value: a.value,
            utilities: Some(aux.utilities.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: PartialState,
    pub features: Vec<f64>,
    pub action: (usize, usize),
    pub feature: usize,
    pub log_prob: f64,
    pub value: f64,
    /// `r_e + r_m`
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// `r_p + r_d`, credited at the last step.
    pub terminal_reward: f64,
    pub episode_return: f64,
    pub correct: Option<bool>,
}

impl Trajectory {
    /// Per-step rewards with the terminal part folded into the last step.
    pub fn rewards(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        if let Some(last) = r.last_mut() {
            *last += self.terminal_reward;
        }
        r
    }

    /// Generalized advantage estimates and returns; the value after the last step is 0.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let r = self.rewards();
        let t = r.len();
        let mut adv = vec![0.0; t];
        let mut next_value = 0.0;
        let mut acc = 0.0;
        for i in (0..t).rev() {
            let v = self.steps[i].value;
            let delta = r[i] + gamma * next_value - v;
            acc = delta + gamma * lambda * acc;
            adv[i] = acc;
            next_value = v;
        }
        let ret = adv.iter().zip(&self.steps).map(|(a, s)| a + s.value).collect();
        (adv, ret)
    }
}

/// Run one episode per instance with the stochastic policy.
pub fn collect_rollouts(
    net: &PolicyNetwork,
    ctx: &EpisodeContext<'_>,
    instances: &[&Instance],
    mode: ActMode,
    rng: &mut Rng,
) -> Result<Vec<Trajectory>, AgentError> {
    let mut policy = RlPolicy::new(net, mode);
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let trace = run_episode(ctx, inst, &mut policy, rng)?;
        let steps = trace
            .steps
            .iter()
            .map(|s| {
                let aux = s.aux.as_ref().expect("learned policy always requests auxiliary info");
                TrajectoryStep {
                    state: s.state.clone(),
                    features: policy_features(&s.state, aux),
                    action: s.choice.action.expect("hierarchical choice"),
                    feature: s.choice.feature,
                    log_prob: s.choice.log_prob,
                    value: s.choice.value,
                    reward: s.env_reward + s.model_reward,
                }
            })
            .collect();
        out.push(Trajectory {
            steps,
            terminal_reward: trace.prediction_reward + trace.detector_reward,
            episode_return: trace.total_reward,
            correct: trace.correct(),
        });
    }
    Ok(out)
}

/// One training sample, also the unit written when a batch is dumped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: (usize, usize),
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

/// Flatten trajectories into samples with normalized advantages.
pub fn build_samples(trajectories: &[Trajectory], gamma: f64, lambda: f64) -> Vec<Sample> {
    let mut samples = Vec::new();
    for t in trajectories {
        let (adv, ret) = t.advantages(gamma, lambda);
        for ((s, a), r) in t.steps.iter().zip(adv).zip(ret) {
            samples.push(Sample {
                features: s.features.clone(),
                mask: s.state.mask().bits().to_vec(),
                action: s.action,
                old_log_prob: s.log_prob,
                advantage: a,
                target: r,
            });
        }
    }
    let a: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    let (m, sd) = (math::mean(&a), math::std_dev(&a));
    if samples.len() > 1 {
        for s in &mut samples {
            s.advantage = if sd > 1e-8 { (s.advantage - m) / sd } else { s.advantage - m };
        }
    }
    samples
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Derivative of the surrogate with respect to the log-probability.
fn surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped {
        0.0
    } else {
        ratio * advantage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateStats {
    pub update: usize,
    pub mean_return: f64,
    pub accuracy: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean of `log π_old - log π_new` over the last epoch.
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Owns the policy and its optimizers.
#[derive(Debug, Clone)]
pub struct AgentTrainer {
    net: PolicyNetwork,
    actor_opt: Adam,
    critic_opt: Adam,
    cfg: TrainConfig,
    updates_done: usize,
}

impl AgentTrainer {
    pub fn new(net: PolicyNetwork, cfg: TrainConfig) -> Result<Self, AgentError> {
        cfg.validate()?;
        let actor_opt = Adam::new(net.actor.num_params(), cfg.lr).with_clip(cfg.max_grad_norm);
        let critic_opt = Adam::new(net.critic.num_params(), cfg.lr).with_clip(cfg.max_grad_norm);
        Ok(AgentTrainer { net, actor_opt, critic_opt, cfg, updates_done: 0 })
    }

    pub fn net(&self) -> &PolicyNetwork {
        &self.net
    }

    pub fn into_net(self) -> PolicyNetwork {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn dump(&self, samples: &[Sample]) -> Option<PathBuf> {
        let dir = self.cfg.dump_dir.as_ref()?;
        let path = dir.join(format!("failing_batch_{}.json", self.updates_done));
        let body = serde_json::to_string(samples).ok()?;
        std::fs::create_dir_all(dir).ok()?;
        std::fs::write(&path, body).ok()?;
        Some(path)
    }

    /// Clipped-surrogate epochs over `trajectories`.
    pub fn update(&mut self, trajectories: &[Trajectory], rng: &mut Rng) -> Result<UpdateStats, AgentError> {
        if trajectories.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let samples = build_samples(trajectories, self.cfg.gamma, self.cfg.lambda);
        if samples.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let width = samples[0].features.len();
        let out_dim = self.net.actor.output_dim();
        let clip = self.cfg.clip;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut actor_tape, mut critic_tape) = (BatchTape::default(), BatchTape::default());
        let mut actor_grad = vec![0.0; self.net.actor.num_params()];
        let mut critic_grad = vec![0.0; self.net.critic.num_params()];
        let mut logit_grad = vec![0.0; out_dim];
        let mut last = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            let (mut pl, mut vl, mut ent, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for chunk in order.chunks(self.cfg.minibatch) {
                let nb = chunk.len();
                let scale = 1.0 / nb as f64;
                let mut x = DMatrix::zeros(nb, width);
                for (r, &i) in chunk.iter().enumerate() {
                    for (c, &v) in samples[i].features.iter().enumerate() {
                        x[(r, c)] = v;
                    }
                }
                self.net.actor.forward_batch(&x, &mut actor_tape);
                self.net.critic.forward_batch(&x, &mut critic_tape);
                let logits = actor_tape.output();
                let values = critic_tape.output();
                let mut d_logits = DMatrix::zeros(nb, out_dim);
                let mut d_values = DMatrix::zeros(nb, 1);
                let mut batch_loss = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    let s = &samples[i];
                    let row: Vec<f64> = (0..out_dim).map(|c| logits[(r, c)]).collect();
                    let mask = ObservationMask::from_bits(s.mask.clone());
                    let dist = ActionDistribution::new(&row, &self.net.grouping, &mask)?;
                    let lp = dist.log_prob(s.action.0, s.action.1);
                    let ratio = (lp - s.old_log_prob).exp();
                    let h = dist.entropy();
                    let surr = clipped_surrogate(ratio, s.advantage, clip);
                    let v_err = values[(r, 0)] - s.target;
                    let loss = -surr - self.cfg.entropy_coef * h + 0.5 * v_err * v_err;
                    batch_loss += loss;
                    pl -= surr;
                    vl += 0.5 * v_err * v_err;
                    ent += h;
                    kl += s.old_log_prob - lp;
                    if (ratio - 1.0).abs() > clip {
                        clipped += 1.0;
                    }
                    let g = surrogate_grad(ratio, s.advantage, clip);
                    dist.logit_gradient(s.action, -g * scale, -self.cfg.entropy_coef * scale, &mut logit_grad);
                    for c in 0..out_dim {
                        d_logits[(r, c)] = logit_grad[c];
                    }
                    d_values[(r, 0)] = v_err * scale;
                }
                if !batch_loss.is_finite() {
                    let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                    return Err(AgentError::NonFiniteLoss { update: self.updates_done, dump: self.dump(&batch) });
                }
                actor_grad.iter_mut().for_each(|g| *g = 0.0);
                critic_grad.iter_mut().for_each(|g| *g = 0.0);
                self.net.actor.backward_batch(&actor_tape, &d_logits, &mut actor_grad);
                self.net.critic.backward_batch(&critic_tape, &d_values, &mut critic_grad);
                self.actor_opt.step(self.net.actor.params_mut(), &actor_grad);
                self.critic_opt.step(self.net.critic.params_mut(), &critic_grad);
            }
            let n = samples.len() as f64;
            last = (pl / n, vl / n, ent / n, kl / n, clipped / n);
        }
        let returns: Vec<f64> = trajectories.iter().map(|t| t.episode_return).collect();
        let correct: Vec<bool> = trajectories.iter().filter_map(|t| t.correct).collect();
        let stats = UpdateStats {
            update: self.updates_done,
            mean_return: math::mean(&returns),
            accuracy: (!correct.is_empty())
                .then(|| correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64),
            policy_loss: last.0,
            value_loss: last.1,
            entropy: last.2,
            approx_kl: last.3,
            clip_fraction: last.4,
        };
        self.updates_done += 1;
        Ok(stats)
    }

    /// The full loop: sample a batch of training instances, collect, update.
    /// One JSON line per update goes to `log` when given.
    pub fn train(
        &mut self,
        ctx: &EpisodeContext<'_>,
        train: &[Instance],
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<UpdateStats>, AgentError> {
        if train.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut history = Vec::with_capacity(self.cfg.updates);
        for u in 0..self.cfg.updates {
            let seed = self.cfg.seed;
            let mut pick = rng::stream(seed, "agent/batch", u as u64);
            let batch: Vec<&Instance> =
                (0..self.cfg.episodes_per_batch).map(|_| &train[pick.gen_range(0..train.len())]).collect();
            let mut roll = rng::stream(seed, "agent/rollout", u as u64);
            let trajectories = collect_rollouts(&self.net, ctx, &batch, ActMode::Stochastic, &mut roll)?;
            let mut shuffle = rng::stream(seed, "agent/minibatch", u as u64);
            let stats = self.update(&trajectories, &mut shuffle)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &stats)?;
                writeln!(w)?;
            }
            if u % 25 == 0 || u + 1 == self.cfg.updates {
                log::info!(
                    "update {u}: return {:.4}, entropy {:.3}, kl {:.5}",
                    stats.mean_return,
                    stats.entropy,
                    stats.approx_kl
                );
            }
            history.push(stats);
        }
        Ok(history)
    }
}
