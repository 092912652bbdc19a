//! Configured end-to-end runs: data, score model, density model, grouping,
//! agent, then per-budget evaluation with optional OOD scoring.

use super::{
    evaluate_policy, greedy_policy_eval, ood_eval, random_policy_eval, write_metrics_csv, write_metrics_jsonl,
    write_summary_csv, AcquisitionPolicy, EpisodeContext, GreedyPolicy, HarnessError, MetricsRecord, RandomPolicy,
};
use crate::agent::{ActMode, AgentTrainer, PolicyNetwork, RlPolicy, TrainConfig};
use crate::benchmark;
use crate::config::{ConfigError, FlatConfig};
use crate::data_env::{Dataset, EpisodeConfig, PredictionLoss, RewardSign, SyntheticTaskSpec, TaskError, TaskKind};
use crate::dynamics::{estimate_all_mi, GaussianMixtureOracle};
use crate::grouping::{default_group_count, ActionGrouping};
use crate::nn::Activation;
use crate::po_msma::{
    train_detector, DetectorRewardForm, DetectorTrainConfig, DoseTrainConfig, MaskDistribution, MlpScoreModel,
    NoiseSchedule, PoMsmaDetector, ScoreTrainConfig,
};
use crate::rng;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Rl,
    Random,
    Greedy,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "rl" => Some(PolicyKind::Rl),
            "random" => Some(PolicyKind::Random),
            "greedy" => Some(PolicyKind::Greedy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Rl => "rl",
            PolicyKind::Random => "random",
            PolicyKind::Greedy => "greedy",
        }
    }
}

/// Which out-of-distribution set to score against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OodKind {
    /// Every class moved by this many marginal standard deviations on the informative features.
    Shift(f64),
    /// The benchmark's held-out fifth class.
    HeldOutClass,
}

/// Detector reward setting: `None` is off.
pub type DetectorRewardSetting = Option<(RewardSign, f64)>;

pub fn detector_reward_label(setting: DetectorRewardSetting) -> &'static str {
    match setting {
        None => "off",
        Some((RewardSign::Positive, _)) => "+1",
        Some((RewardSign::Negative, _)) => "-1",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    /// Name of the benchmark preset the task came from, if any.
    pub preset: Option<String>,
    pub task_kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ood: Option<OodKind>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub policy: PolicyKind,
    pub repeats: usize,
    pub detector_reward: DetectorRewardSetting,
    pub reward_form: DetectorRewardForm,
    pub alpha: f64,
    pub costs: Option<Vec<f64>>,
    pub loss: PredictionLoss,
    pub schedule: NoiseSchedule,
    pub score: ScoreTrainConfig,
    pub detector: DetectorTrainConfig,
    pub agent: TrainConfig,
    pub groups: Option<usize>,
    /// Monte Carlo draws per expected-information-gain estimate.
    pub mc_samples: usize,
    /// Validation rows used for mutual-information grouping.
    pub mi_rows: usize,
    pub output: Option<PathBuf>,
}

/// Keys understood by [`ExperimentConfig::from_flat`] (task keys included).
pub const KNOWN_KEYS: &[&str] = &[
    "task", "task.kind", "task.dim", "task.rho", "d", "classes", "means", "cov", "priors", "seed",
    "data.train", "data.val", "data.test", "ood", "ood.shift", "budgets", "seeds", "policy", "repeats",
    "detector.reward", "detector.sign", "detector.beta", "detector.form", "reward.alpha", "reward.costs",
    "reward.loss", "score.levels", "score.sigma_max", "score.sigma_min", "score.steps", "score.batch",
    "score.hidden", "score.lr", "score.activation", "score.ema", "dose.hidden", "dose.epochs", "dose.batch",
    "dose.lr", "dose.samples", "calibration.per_bucket", "calibration.quantile", "agent.gamma", "agent.lambda",
    "agent.clip", "agent.entropy", "agent.epochs", "agent.episodes", "agent.minibatch", "agent.lr",
    "agent.max_grad_norm", "agent.updates", "agent.hidden", "agent.groups", "agent.mc_samples", "mi.rows",
    "output",
];

impl ExperimentConfig {
    /// The standard classification benchmark with default settings.
    pub fn standard() -> Self {
        ExperimentConfig {
            task: benchmark::standard_task(0),
            preset: Some("standard".into()),
            task_kind: TaskKind::Classification,
            n_train: 20_000,
            n_val: 2_000,
            n_test: 500,
            ood: None,
            budgets: benchmark::STANDARD_BUDGETS.to_vec(),
            seeds: vec![1, 2, 3],
            policy: PolicyKind::Rl,
            repeats: 5,
            detector_reward: None,
            reward_form: DetectorRewardForm::Standardized,
            alpha: 0.01,
            costs: None,
            loss: PredictionLoss::CrossEntropy,
            schedule: NoiseSchedule::default(),
            score: ScoreTrainConfig { steps: 8000, ..Default::default() },
            detector: DetectorTrainConfig::default(),
            agent: TrainConfig { updates: 150, ..Default::default() },
            groups: None,
            mc_samples: 64,
            mi_rows: 2000,
            output: None,
        }
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self, TaskError> {
        cfg.check_known(KNOWN_KEYS, &[])?;
        let mut out = ExperimentConfig::standard();
        let preset = cfg.raw("task").unwrap_or("standard").trim().to_string();
        let seed: u64 = cfg.get_or("seed", 0)?;
        match preset.as_str() {
            "standard" => {
                out.task = benchmark::standard_task(seed);
            }
            "reconstruction" => {
                let dim: usize = cfg.get_or("task.dim", 16)?;
                let rho: f64 = cfg.get_or("task.rho", 0.8)?;
                if !(rho.abs() < 1.0) || dim == 0 {
                    return Err(cfg.invalid("task.rho", "need |rho| < 1 and a positive dimension").into());
                }
                out.task = benchmark::reconstruction_task(dim, rho, seed);
                out.task_kind = TaskKind::Reconstruction;
            }
            "custom" => out.task = SyntheticTaskSpec::from_config(cfg)?,
            _ => return Err(cfg.invalid("task", "expected standard, reconstruction or custom").into()),
        }
        out.preset = (preset != "custom").then_some(preset);
        if let Some(kind) = cfg.raw("task.kind") {
            out.task_kind = match kind.trim() {
                "classification" => TaskKind::Classification,
                "reconstruction" => TaskKind::Reconstruction,
                _ => return Err(cfg.invalid("task.kind", "expected classification or reconstruction").into()),
            };
        }
        let d = out.task.dim();
        out.n_train = cfg.get_or("data.train", out.n_train)?;
        out.n_val = cfg.get_or("data.val", out.n_val)?;
        out.n_test = cfg.get_or("data.test", out.n_test)?;
        out.ood = match cfg.raw("ood").map(str::trim) {
            None | Some("none") => None,
            Some("shift") => Some(OodKind::Shift(cfg.get_or("ood.shift", 3.0)?)),
            Some("heldout") => {
                if out.preset.as_deref() != Some("standard") {
                    return Err(cfg.invalid("ood", "the held-out class exists only for the standard task").into());
                }
                Some(OodKind::HeldOutClass)
            }
            Some(_) => return Err(cfg.invalid("ood", "expected none, shift or heldout").into()),
        };
        if let Some(b) = cfg.get_list::<usize>("budgets")? {
            out.budgets = b;
        }
        if out.budgets.is_empty() || out.budgets.iter().any(|&b| b == 0 || b > d) {
            return Err(cfg.invalid("budgets", format!("budgets must lie in 1..={d}")).into());
        }
        if let Some(s) = cfg.get_list::<u64>("seeds")? {
            out.seeds = s;
        }
        if out.seeds.is_empty() {
            return Err(cfg.invalid("seeds", "at least one seed is required").into());
        }
        if let Some(p) = cfg.raw("policy") {
            out.policy = PolicyKind::parse(p).ok_or_else(|| cfg.invalid("policy", "expected rl, random or greedy"))?;
        }
        out.repeats = cfg.get_or("repeats", out.repeats)?;
        if out.repeats == 0 {
            return Err(cfg.invalid("repeats", "must be at least 1").into());
        }
        let reward_on = match cfg.raw("detector.reward").map(str::trim) {
            None | Some("off") => false,
            Some("on") => true,
            Some(_) => return Err(cfg.invalid("detector.reward", "expected on or off").into()),
        };
        if reward_on {
            let sign = match cfg.raw("detector.sign") {
                None => RewardSign::Positive,
                Some(s) => RewardSign::parse(s).ok_or_else(|| cfg.invalid("detector.sign", "expected +1 or -1"))?,
            };
            out.detector_reward = Some((sign, cfg.get_or("detector.beta", 1.0)?));
        }
        if let Some(f) = cfg.raw("detector.form") {
            out.reward_form = DetectorRewardForm::parse(f)
                .ok_or_else(|| cfg.invalid("detector.form", "expected standardized or raw"))?;
        }
        out.alpha = cfg.get_or("reward.alpha", out.alpha)?;
        out.costs = cfg.get_list("reward.costs")?;
        if let Some(c) = &out.costs {
            if c.len() != d {
                return Err(cfg.invalid("reward.costs", format!("need {d} costs")).into());
            }
        }
        if let Some(l) = cfg.raw("reward.loss") {
            out.loss = match l.trim() {
                "ce" | "cross-entropy" => PredictionLoss::CrossEntropy,
                "zero-one" | "01" => PredictionLoss::ZeroOne,
                _ => return Err(cfg.invalid("reward.loss", "expected ce or zero-one").into()),
            };
        }
        let levels: usize = cfg.get_or("score.levels", 10)?;
        let smax: f64 = cfg.get_or("score.sigma_max", 1.0)?;
        let smin: f64 = cfg.get_or("score.sigma_min", 0.01)?;
        out.schedule = NoiseSchedule::geometric(levels, smax, smin)
            .map_err(|e| cfg.invalid("score.levels", e.to_string()))?;
        let s = &mut out.score;
        s.steps = cfg.get_or("score.steps", s.steps)?;
        s.batch = cfg.get_or("score.batch", s.batch)?;
        s.lr = cfg.get_or("score.lr", s.lr)?;
        s.ema = cfg.get_or("score.ema", s.ema)?;
        if let Some(h) = cfg.get_list("score.hidden")? {
            s.hidden = h;
        }
        if let Some(a) = cfg.raw("score.activation") {
            s.activation =
                Activation::parse(a.trim()).ok_or_else(|| cfg.invalid("score.activation", "unknown activation"))?;
        }
        let det = &mut out.detector;
        let dose: &mut DoseTrainConfig = &mut det.dose;
        if let Some(h) = cfg.get_list("dose.hidden")? {
            dose.hidden = h;
        }
        dose.epochs = cfg.get_or("dose.epochs", dose.epochs)?;
        dose.batch = cfg.get_or("dose.batch", dose.batch)?;
        dose.lr = cfg.get_or("dose.lr", dose.lr)?;
        det.dose_samples = cfg.get_or("dose.samples", det.dose_samples)?;
        det.calibration_per_bucket = cfg.get_or("calibration.per_bucket", det.calibration_per_bucket)?;
        det.quantile = cfg.get_or("calibration.quantile", det.quantile)?;
        let a = &mut out.agent;
        a.gamma = cfg.get_or("agent.gamma", a.gamma)?;
        a.lambda = cfg.get_or("agent.lambda", a.lambda)?;
        a.clip = cfg.get_or("agent.clip", a.clip)?;
        a.entropy_coef = cfg.get_or("agent.entropy", a.entropy_coef)?;
        a.epochs = cfg.get_or("agent.epochs", a.epochs)?;
        a.episodes_per_batch = cfg.get_or("agent.episodes", a.episodes_per_batch)?;
        a.minibatch = cfg.get_or("agent.minibatch", a.minibatch)?;
        a.lr = cfg.get_or("agent.lr", a.lr)?;
        a.max_grad_norm = cfg.get_or("agent.max_grad_norm", a.max_grad_norm)?;
        a.updates = cfg.get_or("agent.updates", a.updates)?;
        if let Some(h) = cfg.get_list("agent.hidden")? {
            a.hidden = h;
        }
        a.validate().map_err(|e| cfg.invalid("agent.gamma", e.to_string()))?;
        out.groups = cfg.get_list::<usize>("agent.groups")?.and_then(|v| v.first().copied());
        out.mc_samples = cfg.get_or("agent.mc_samples", out.mc_samples)?;
        out.mi_rows = cfg.get_or("mi.rows", out.mi_rows)?;
        out.output = cfg.raw("output").map(PathBuf::from);
        Ok(out)
    }

    /// Episode settings at `budget` (detector reward included when on).
    pub fn episode(&self, budget: usize) -> EpisodeConfig {
        let d = self.task.dim();
        let mut e = EpisodeConfig::new(d, budget, self.task_kind);
        e.alpha = self.alpha;
        if let Some(c) = &self.costs {
            e.costs = c.clone();
        }
        e.loss = self.loss;
        if let Some((sign, beta)) = self.detector_reward {
            e = e.with_detector(beta, sign);
        }
        e
    }

    /// Whether a detector must be trained.
    pub fn needs_detector(&self) -> bool {
        self.detector_reward.is_some() || self.ood.is_some()
    }
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage { stage: name, message: e.to_string() })
}

/// In-distribution splits for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset), HarnessError> {
    stage("data", cfg.task.with_seed(seed).generate(cfg.n_train, cfg.n_val, cfg.n_test))
}

/// The OOD test set for one seed, if configured.
pub fn ood_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Option<Dataset>, HarnessError> {
    let spec = match cfg.ood {
        None => return Ok(None),
        Some(OodKind::Shift(k)) => stage("ood", benchmark::shifted_task(&cfg.task, k))?,
        Some(OodKind::HeldOutClass) => benchmark::held_out_class_task(seed),
    };
    Ok(Some(spec.sample(cfg.n_test, &mut rng::stream(seed, "data/ood", 0))))
}

pub fn train_score(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<MlpScoreModel, HarnessError> {
    let sc = ScoreTrainConfig { seed, ..cfg.score.clone() };
    let (model, _) =
        stage("score", MlpScoreModel::train(train, cfg.schedule.clone(), &MaskDistribution::UniformCardinality, &sc))?;
    Ok(model)
}

pub fn train_dose(
    cfg: &ExperimentConfig,
    score: MlpScoreModel,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<PoMsmaDetector, HarnessError> {
    let dc = DetectorTrainConfig { seed, ..cfg.detector.clone() };
    stage("dose", train_detector(score, train, val, &dc))
}

/// Groups from mutual information estimated on the validation split.
pub fn build_grouping(
    cfg: &ExperimentConfig,
    oracle: &GaussianMixtureOracle,
    val: &Dataset,
) -> Result<ActionGrouping, HarnessError> {
    let rows = &val.rows()[..cfg.mi_rows.min(val.len())];
    let mi = stage("grouping", estimate_all_mi(oracle, rows))?;
    let k = cfg.groups.unwrap_or_else(|| default_group_count(cfg.task.dim()));
    stage("grouping", ActionGrouping::build(&mi, k))
}

/// Train a policy at `budget`; one JSON line per update goes to `log` when given.
pub fn train_agent(
    cfg: &ExperimentConfig,
    oracle: &GaussianMixtureOracle,
    detector: Option<&PoMsmaDetector>,
    grouping: &ActionGrouping,
    train: &Dataset,
    budget: usize,
    seed: u64,
    log: Option<&mut dyn std::io::Write>,
) -> Result<PolicyNetwork, HarnessError> {
    let episode = cfg.episode(budget);
    let mut ctx = EpisodeContext::new(oracle, &episode);
    ctx.reward_form = cfg.reward_form;
    if let Some(d) = detector {
        ctx = ctx.with_detector(d);
    }
    let tc = TrainConfig { seed, ..cfg.agent.clone() };
    let net = PolicyNetwork::new(grouping.clone(), oracle.classes(), &tc.hidden, &mut rng::stream(seed, "agent/init", 0));
    let mut trainer = stage("agent", AgentTrainer::new(net, tc))?;
    stage("agent", trainer.train(&ctx, train.rows(), log))?;
    Ok(trainer.into_net())
}

/// Accuracy or MSE, return and (when an OOD set and detector exist) AUROC for one budget.
pub fn evaluate_budget(
    cfg: &ExperimentConfig,
    oracle: &GaussianMixtureOracle,
    detector: Option<&PoMsmaDetector>,
    policy_net: Option<&PolicyNetwork>,
    test: &Dataset,
    ood: Option<&Dataset>,
    budget: usize,
    seed: u64,
) -> Result<MetricsRecord, HarnessError> {
    let episode = cfg.episode(budget);
    let mut record = match cfg.policy {
        PolicyKind::Random => {
            random_policy_eval(oracle, &episode, test.rows(), &[budget], cfg.repeats, seed)?.remove(0)
        }
        PolicyKind::Greedy => greedy_policy_eval(oracle, &episode, test.rows(), &[budget], seed)?.remove(0),
        PolicyKind::Rl => {
            let net = policy_net.ok_or_else(|| HarnessError::Stage { stage: "eval", message: "no policy".into() })?;
            let mut ctx = EpisodeContext::new(oracle, &episode);
            ctx.reward_form = cfg.reward_form;
            if let Some(d) = detector {
                ctx = ctx.with_detector(d);
            }
            let s = evaluate_policy(&ctx, test.rows(), &mut RlPolicy::new(net, ActMode::Deterministic), seed)?;
            MetricsRecord {
                policy: "rl".into(),
                detector_reward: String::new(),
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
    };
    record.detector_reward = detector_reward_label(cfg.detector_reward).into();
    if let (Some(ood), Some(det)) = (ood, detector) {
        // OOD scoring needs no detector reward, only the terminal log-probs
        let plain = EpisodeConfig { detector_beta: None, ..episode.clone() };
        let ctx = EpisodeContext::new(oracle, &plain).with_detector(det);
        let mut policy: Box<dyn AcquisitionPolicy + '_> = match cfg.policy {
            PolicyKind::Random => Box::new(RandomPolicy),
            PolicyKind::Greedy => Box::new(GreedyPolicy),
            PolicyKind::Rl => Box::new(RlPolicy::new(policy_net.expect("checked above"), ActMode::Deterministic)),
        };
        let report = ood_eval(&ctx, test.rows(), ood.rows(), policy.as_mut(), seed)?;
        record.auroc = Some(report.auroc);
        record.false_negative_rate = Some(report.false_negative_rate);
    }
    Ok(record)
}

/// Output of [`train_and_evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    /// Files written under the output directory.
    pub artifacts: Vec<PathBuf>,
}

fn save(ck: crate::checkpoint::Checkpoint, path: PathBuf, artifacts: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    stage("checkpoint", ck.save(&path))?;
    artifacts.push(path);
    Ok(())
}

/// Every stage for every seed and budget; artifacts go to `cfg.output` when set.
pub fn train_and_evaluate(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let mut records = Vec::new();
    let mut artifacts = Vec::new();
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir)?;
    }
    for &seed in &cfg.seeds {
        let (train, val, test) = prepare_data(cfg, seed)?;
        let ood = ood_dataset(cfg, seed)?;
        let oracle = GaussianMixtureOracle::from_spec(&cfg.task.with_seed(seed), cfg.mc_samples);
        let seed_dir = cfg.output.as_ref().map(|d| d.join(format!("seed_{seed}")));
        if let Some(dir) = &seed_dir {
            std::fs::create_dir_all(dir)?;
        }
        let detector = if cfg.needs_detector() {
            let score = train_score(cfg, &train, seed)?;
            let det = train_dose(cfg, score, &train, &val, seed)?;
            if let Some(dir) = &seed_dir {
                save(det.score_model().to_checkpoint(), dir.join("score.ckpt"), &mut artifacts)?;
                save(det.dose().to_checkpoint(), dir.join("dose.ckpt"), &mut artifacts)?;
                let path = dir.join("calibration.txt");
                std::fs::write(&path, det.calibration().to_text())?;
                artifacts.push(path);
            }
            Some(det)
        } else {
            None
        };
        let grouping = if cfg.policy == PolicyKind::Rl { Some(build_grouping(cfg, &oracle, &val)?) } else { None };
        if let (Some(dir), Some(g)) = (&seed_dir, &grouping) {
            let path = dir.join("grouping.txt");
            std::fs::write(&path, g.to_artifact())?;
            artifacts.push(path);
        }
        for &budget in &cfg.budgets {
            let net = match &grouping {
                Some(g) => {
                    let mut log_file = match &seed_dir {
                        Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(
                            dir.join(format!("train_b{budget}.jsonl")),
                        )?)),
                        None => None,
                    };
                    let log = log_file.as_mut().map(|w| w as &mut dyn std::io::Write);
                    let net = train_agent(cfg, &oracle, detector.as_ref(), g, &train, budget, seed, log)?;
                    if let Some(dir) = &seed_dir {
                        artifacts.push(dir.join(format!("train_b{budget}.jsonl")));
                        save(net.to_checkpoint(), dir.join(format!("policy_b{budget}.ckpt")), &mut artifacts)?;
                    }
                    Some(net)
                }
                None => None,
            };
            let ood_ref = ood.as_ref();
            records.push(evaluate_budget(cfg, &oracle, detector.as_ref(), net.as_ref(), &test, ood_ref, budget, seed)?);
        }
    }
    if let Some(dir) = &cfg.output {
        write_outputs(dir, &records, &mut artifacts)?;
    }
    Ok(ExperimentOutput { records, artifacts })
}

/// `metrics.csv`, `metrics.jsonl` and `summary.csv` under `dir`.
pub fn write_outputs(dir: &Path, records: &[MetricsRecord], artifacts: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let csv = dir.join("metrics.csv");
    write_metrics_csv(&csv, records)?;
    let jsonl = dir.join("metrics.jsonl");
    write_metrics_jsonl(&jsonl, records)?;
    let summary = dir.join("summary.csv");
    write_summary_csv(&summary, &super::summarize(records))?;
    artifacts.extend([csv, jsonl, summary]);
    Ok(())
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Stage { stage: "config", message: e.to_string() }
    }
}
