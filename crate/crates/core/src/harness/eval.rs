use super::{mean_or_zero, run_episode, AcquisitionPolicy, EpisodeContext, EpisodeTrace, GreedyPolicy, HarnessError, MetricsRecord, RandomPolicy};
use crate::data_env::{EpisodeConfig, Instance, ObservationMask, Prediction, TaskKind};
use crate::data_env::{prediction_reward, reconstruction_mse, PartialState};
use crate::dynamics::GaussianMixtureOracle;
use crate::po_msma::auroc;
use crate::rng;

/// Aggregate of one policy over a set of instances at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub mean_return: f64,
    /// Terminal-mask log-probs, when a detector is present.
    pub log_probs: Vec<f64>,
    /// Acquired features of every episode, in order.
    pub acquired: Vec<Vec<usize>>,
}

fn summarize_traces(traces: &[EpisodeTrace], instances: &[Instance]) -> EvalSummary {
    let n = traces.len();
    let mut correct = 0usize;
    let mut mse = Vec::new();
    for (t, inst) in traces.iter().zip(instances) {
        match &t.prediction {
            Prediction::Class { label, .. } => correct += (*label == inst.y) as usize,
            Prediction::Reconstruction(xhat) => mse.push(reconstruction_mse(&inst.x, xhat, t.final_state.mask())),
        }
    }
    let is_class = traces.first().map_or(true, |t| t.correct().is_some());
    EvalSummary {
        episodes: n,
        accuracy: is_class.then(|| correct as f64 / n.max(1) as f64),
        mse: (!is_class).then(|| mean_or_zero(&mse)),
        mean_return: mean_or_zero(&traces.iter().map(|t| t.total_reward).collect::<Vec<_>>()),
        log_probs: traces.iter().filter_map(|t| t.ood_log_prob).collect(),
        acquired: traces.iter().map(|t| t.acquired()).collect(),
    }
}

/// Run `policy` once on every instance; episode `i` draws from its own seed stream.
pub fn evaluate_policy(
    ctx: &EpisodeContext<'_>,
    instances: &[Instance],
    policy: &mut dyn AcquisitionPolicy,
    seed: u64,
) -> Result<EvalSummary, HarnessError> {
    let traces = run_all(ctx, instances, policy, seed)?;
    Ok(summarize_traces(&traces, instances))
}

pub(crate) fn run_all(
    ctx: &EpisodeContext<'_>,
    instances: &[Instance],
    policy: &mut dyn AcquisitionPolicy,
    seed: u64,
) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let purpose = format!("eval/{}", policy.name());
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| run_episode(ctx, inst, policy, &mut rng::stream(seed, &purpose, i as u64)))
        .collect()
}

/// Prediction from the empty state (the zero-budget edge case of the random baseline).
fn zero_budget_summary(
    oracle: &GaussianMixtureOracle,
    template: &EpisodeConfig,
    instances: &[Instance],
) -> Result<EvalSummary, HarnessError> {
    let d = template.dim();
    let empty = PartialState::empty(d);
    let prediction = crate::agent::predict_final(oracle, &empty, template.task)?;
    let mut correct = 0;
    let mut rewards = Vec::with_capacity(instances.len());
    let mut mse = Vec::new();
    for inst in instances {
        let mask = ObservationMask::empty(d);
        rewards.push(prediction_reward(inst, &mask, &prediction, template.loss)?);
        match &prediction {
            Prediction::Class { label, .. } => correct += (*label == inst.y) as usize,
            Prediction::Reconstruction(xhat) => mse.push(reconstruction_mse(&inst.x, xhat, &mask)),
        }
    }
    let class = template.task == TaskKind::Classification;
    Ok(EvalSummary {
        episodes: instances.len(),
        accuracy: class.then(|| correct as f64 / instances.len().max(1) as f64),
        mse: (!class).then(|| mean_or_zero(&mse)),
        mean_return: mean_or_zero(&rewards),
        log_probs: Vec::new(),
        acquired: vec![Vec::new(); instances.len()],
    })
}

fn record(policy: &str, budget: usize, seed: u64, s: &EvalSummary) -> MetricsRecord {
    MetricsRecord {
        policy: policy.to_string(),
        detector_reward: "off".into(),
        budget,
        seed,
        accuracy: s.accuracy,
        mse: s.mse,
        auroc: None,
        false_negative_rate: None,
        mean_return: s.mean_return,
        episodes: s.episodes,
    }
}

fn average(records: &[MetricsRecord]) -> MetricsRecord {
    let n = records.len() as f64;
    let avg = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    MetricsRecord {
        accuracy: avg(&|r| r.accuracy),
        mse: avg(&|r| r.mse),
        mean_return: records.iter().map(|r| r.mean_return).sum::<f64>() / n,
        episodes: records.iter().map(|r| r.episodes).sum(),
        ..records[0].clone()
    }
}

/// Uniform-random acquisition, averaged over `repeats` runs per budget.
/// A budget of 0 predicts from the prior.
pub fn random_policy_eval(
    oracle: &GaussianMixtureOracle,
    template: &EpisodeConfig,
    instances: &[Instance],
    budgets: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::Policy("repeats must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let summary = if b == 0 {
                zero_budget_summary(oracle, template, instances)?
            } else {
                let cfg = EpisodeConfig { budget: b, ..template.clone() };
                let ctx = EpisodeContext::new(oracle, &cfg);
                evaluate_policy(&ctx, instances, &mut RandomPolicy, rng::derive_seed(seed, "random/repeat", r as u64))?
            };
            runs.push(record("random", b, seed, &summary));
        }
        out.push(average(&runs));
    }
    Ok(out)
}

/// EDDI-style greedy acquisition at each budget.
pub fn greedy_policy_eval(
    oracle: &GaussianMixtureOracle,
    template: &EpisodeConfig,
    instances: &[Instance],
    budgets: &[usize],
    seed: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    budgets
        .iter()
        .map(|&b| {
            let cfg = EpisodeConfig { budget: b, ..template.clone() };
            let ctx = EpisodeContext::new(oracle, &cfg);
            let s = evaluate_policy(&ctx, instances, &mut GreedyPolicy, seed)?;
            Ok(record("greedy", b, seed, &s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub auroc: f64,
    pub in_log_probs: Vec<f64>,
    pub ood_log_probs: Vec<f64>,
    /// Fraction of OOD inputs not flagged at the calibrated threshold.
    pub false_negative_rate: f64,
    /// Fraction of in-distribution inputs flagged at the calibrated threshold.
    pub false_positive_rate: f64,
    pub in_summary: EvalSummary,
}

/// Acquire on both sets with the same policy, then score the terminal masks.
/// The detector in `ctx` must already be trained on in-distribution data only.
pub fn ood_eval(
    ctx: &EpisodeContext<'_>,
    in_set: &[Instance],
    ood_set: &[Instance],
    policy: &mut dyn AcquisitionPolicy,
    seed: u64,
) -> Result<OodReport, HarnessError> {
    let detector = ctx.detector.ok_or(HarnessError::MissingDetector)?;
    let in_traces = run_all(ctx, in_set, policy, rng::derive_seed(seed, "ood/in", 0))?;
    let ood_traces = run_all(ctx, ood_set, policy, rng::derive_seed(seed, "ood/out", 0))?;
    let flagged = |t: &EpisodeTrace| {
        let lp = t.ood_log_prob.expect("detector present");
        lp < detector.calibration().bucket(t.final_state.mask().count()).tau
    };
    let in_lp: Vec<f64> = in_traces.iter().filter_map(|t| t.ood_log_prob).collect();
    let ood_lp: Vec<f64> = ood_traces.iter().filter_map(|t| t.ood_log_prob).collect();
    let auroc = auroc(&in_lp, &ood_lp).map_err(|e| HarnessError::Stage { stage: "ood_eval", message: e.to_string() })?;
    let fnr = ood_traces.iter().filter(|t| !flagged(t)).count() as f64 / ood_traces.len() as f64;
    let fpr = in_traces.iter().filter(|t| flagged(t)).count() as f64 / in_traces.len() as f64;
    Ok(OodReport {
        auroc,
        in_log_probs: in_lp,
        ood_log_probs: ood_lp,
        false_negative_rate: fnr,
        false_positive_rate: fpr,
        in_summary: summarize_traces(&in_traces, in_set),
    })
}
