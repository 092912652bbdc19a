use anyhow::{Context, Result};
use log::info;
use rafa_core::agent::PolicyNetwork;
use rafa_core::checkpoint::Checkpoint;
use rafa_core::config::FlatConfig;
use rafa_core::data_env::{Dataset, ObservationMask, RewardSign};
use rafa_core::dynamics::GaussianMixtureOracle;
use rafa_core::harness::{
    self, detector_reward_label, summarize, write_metrics_csv, write_metrics_jsonl, write_summary_csv,
    ExperimentConfig, MetricsRecord, PolicyKind,
};
use rafa_core::po_msma::{Calibration, DoseModel, MlpScoreModel, PoMsmaDetector};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::manifest::{sha256_text, RunManifest};
use crate::{Command, Common, Failure, OnOff, RewardArgs, Stage};

/// Parsed config plus the run directory and its manifest.
struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

impl Run {
    fn open(common: &Common, reward: Option<&RewardArgs>) -> Result<Self> {
        let text = std::fs::read_to_string(&common.config)
            .map_err(|e| usage(format!("cannot read config {}: {e}", common.config.display())))?;
        let mut flat = FlatConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", common.config.display())))?;
        flat.apply_process_env();
        let mut cfg =
            ExperimentConfig::from_flat(&flat).map_err(|e| usage(format!("{}: {e}", common.config.display())))?;
        if let Some(r) = reward {
            apply_reward_args(&mut cfg, r)?;
        }
        let dir = common.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("runs"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = RunManifest::open(&dir, &sha256_text(&flat.canonical()), &cfg.seeds)?;
        Ok(Run { cfg, dir, manifest })
    }

    fn key(seed: u64, name: &str) -> String {
        format!("seed_{seed}/{name}")
    }

    fn need(&self, seed: u64, name: &str, needed_by: &str, produced_by: &str) -> Result<PathBuf> {
        self.manifest.verify(&self.dir, &Self::key(seed, name), needed_by, produced_by)
    }

    fn dataset(&self, seed: u64, split: &str, needed_by: &str) -> Result<Dataset> {
        let path = self.need(seed, &format!("{split}.csv"), needed_by, "gen-data")?;
        Dataset::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn checkpoint(&self, seed: u64, name: &str, needed_by: &str, produced_by: &str) -> Result<Checkpoint> {
        let path = self.need(seed, name, needed_by, produced_by)?;
        Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn detector(&self, seed: u64, needed_by: &str) -> Result<PoMsmaDetector> {
        let score = MlpScoreModel::from_checkpoint(&self.checkpoint(seed, "score.ckpt", needed_by, "train score")?)?;
        let dose = DoseModel::from_checkpoint(&self.checkpoint(seed, "dose.ckpt", needed_by, "train dose")?)?;
        let cal_path = self.need(seed, "calibration.txt", needed_by, "train dose")?;
        let calibration = Calibration::from_text(&std::fs::read_to_string(&cal_path)?)?;
        Ok(PoMsmaDetector::new(score, dose, calibration))
    }

    /// Refuse to overwrite a recorded artifact unless forced; forcing keeps the old file.
    fn claim(&mut self, seed: u64, name: &str, force: bool) -> Result<PathBuf> {
        let key = Self::key(seed, name);
        if self.manifest.has(&key) {
            if !force {
                return Err(usage(format!("`{key}` already exists; pass --force to rebuild (the old file is kept)")));
            }
            self.manifest.retire(&self.dir, &key)?;
        }
        let rel = PathBuf::from(&key);
        std::fs::create_dir_all(self.dir.join(rel.parent().expect("seed dir")))?;
        Ok(rel)
    }

    fn record(&mut self, rel: &Path, stage: &str) -> Result<()> {
        let key = rel.to_string_lossy().into_owned();
        self.manifest.record(&self.dir, &key, rel, stage)?;
        self.manifest.save(&self.dir)
    }

    fn oracle(&self, seed: u64) -> GaussianMixtureOracle {
        GaussianMixtureOracle::from_spec(&self.cfg.task.with_seed(seed), self.cfg.mc_samples)
    }
}

fn apply_reward_args(cfg: &mut ExperimentConfig, r: &RewardArgs) -> Result<()> {
    let sign = match r.sign.as_deref() {
        None => None,
        Some(s) => Some(RewardSign::parse(s).ok_or_else(|| usage(format!("--sign must be +1 or -1, got `{s}`")))?),
    };
    match r.detector_reward {
        Some(OnOff::Off) => cfg.detector_reward = None,
        Some(OnOff::On) => {
            let (s0, b0) = cfg.detector_reward.unwrap_or((RewardSign::Positive, 1.0));
            cfg.detector_reward = Some((sign.unwrap_or(s0), r.beta.unwrap_or(b0)));
        }
        None => {
            if let Some((s0, b0)) = cfg.detector_reward {
                cfg.detector_reward = Some((sign.unwrap_or(s0), r.beta.unwrap_or(b0)));
            }
        }
    }
    if let Some(b) = &r.budgets {
        let d = cfg.task.dim();
        if b.is_empty() || b.iter().any(|&v| v == 0 || v > d) {
            return Err(usage(format!("--budgets must lie in 1..={d}")));
        }
        cfg.budgets = b.clone();
    }
    Ok(())
}

/// File-name tag of a detector-reward setting.
fn reward_tag(cfg: &ExperimentConfig) -> &'static str {
    match detector_reward_label(cfg.detector_reward) {
        "+1" => "pos",
        "-1" => "neg",
        _ => "off",
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, force } => gen_data(&mut Run::open(&common, None)?, force),
        Command::Train { stage, common, reward, force } => {
            let mut run = Run::open(&common, Some(&reward))?;
            match stage {
                Stage::Score => train_score(&mut run, force),
                Stage::Dose => train_dose(&mut run, force),
                Stage::Agent => train_agent(&mut run, force),
            }
        }
        Command::Eval { common, reward, policy, repeats } => {
            let mut run = Run::open(&common, Some(&reward))?;
            run.cfg.policy = PolicyKind::parse(&policy)
                .ok_or_else(|| usage(format!("unknown policy `{policy}`; expected rl, random or greedy")))?;
            if let Some(r) = repeats {
                if r == 0 {
                    return Err(usage("--repeats must be at least 1"));
                }
                run.cfg.repeats = r;
            }
            eval(&mut run)
        }
        Command::Detect { common, input, seed, tau, output } => {
            detect(&Run::open(&common, None)?, &input, seed, tau, output.as_deref())
        }
        Command::Report { common } => report(&mut Run::open(&common, None)?),
    }
}

fn gen_data(run: &mut Run, force: bool) -> Result<()> {
    for seed in run.cfg.seeds.clone() {
        let (train, val, test) = harness::prepare_data(&run.cfg, seed)?;
        let ood = harness::ood_dataset(&run.cfg, seed)?;
        let mut splits = vec![("train", train), ("val", val), ("test", test)];
        if let Some(o) = ood {
            splits.push(("ood", o));
        }
        for (name, data) in splits {
            let rel = run.claim(seed, &format!("{name}.csv"), force)?;
            data.save(&run.dir.join(&rel))?;
            run.record(&rel, "gen-data")?;
            info!("seed {seed}: wrote {} ({} rows)", rel.display(), data.len());
        }
    }
    Ok(())
}

fn train_score(run: &mut Run, force: bool) -> Result<()> {
    for seed in run.cfg.seeds.clone() {
        let train = run.dataset(seed, "train", "train score")?;
        let rel = run.claim(seed, "score.ckpt", force)?;
        let model = harness::train_score(&run.cfg, &train, seed)?;
        model.to_checkpoint().save(&run.dir.join(&rel))?;
        run.record(&rel, "train score")?;
        info!("seed {seed}: wrote {}", rel.display());
    }
    Ok(())
}

fn train_dose(run: &mut Run, force: bool) -> Result<()> {
    for seed in run.cfg.seeds.clone() {
        let score = MlpScoreModel::from_checkpoint(&run.checkpoint(seed, "score.ckpt", "train dose", "train score")?)?;
        let train = run.dataset(seed, "train", "train dose")?;
        let val = run.dataset(seed, "val", "train dose")?;
        let dose_rel = run.claim(seed, "dose.ckpt", force)?;
        let cal_rel = run.claim(seed, "calibration.txt", force)?;
        let det = harness::train_dose(&run.cfg, score, &train, &val, seed)?;
        det.dose().to_checkpoint().save(&run.dir.join(&dose_rel))?;
        std::fs::write(run.dir.join(&cal_rel), det.calibration().to_text())?;
        run.record(&dose_rel, "train dose")?;
        run.record(&cal_rel, "train dose")?;
        info!("seed {seed}: wrote {} and {}", dose_rel.display(), cal_rel.display());
    }
    Ok(())
}

fn train_agent(run: &mut Run, force: bool) -> Result<()> {
    let tag = reward_tag(&run.cfg);
    for seed in run.cfg.seeds.clone() {
        let train = run.dataset(seed, "train", "train agent")?;
        let val = run.dataset(seed, "val", "train agent")?;
        let detector = match run.cfg.detector_reward {
            Some(_) => Some(run.detector(seed, "train agent with detector reward")?),
            None => None,
        };
        let oracle = run.oracle(seed);
        let grouping = harness::build_grouping(&run.cfg, &oracle, &val)?;
        let g_rel = PathBuf::from(Run::key(seed, "grouping.txt"));
        std::fs::write(run.dir.join(&g_rel), grouping.to_artifact())?;
        run.record(&g_rel, "train agent")?;
        for budget in run.cfg.budgets.clone() {
            let rel = run.claim(seed, &format!("policy_b{budget}_{tag}.ckpt"), force)?;
            let log_rel = run.claim(seed, &format!("train_b{budget}_{tag}.jsonl"), force)?;
            let mut log = std::io::BufWriter::new(std::fs::File::create(run.dir.join(&log_rel))?);
            let net = harness::train_agent(
                &run.cfg,
                &oracle,
                detector.as_ref(),
                &grouping,
                &train,
                budget,
                seed,
                Some(&mut log as &mut dyn Write),
            )?;
            log.flush()?;
            drop(log);
            net.to_checkpoint().save(&run.dir.join(&rel))?;
            run.record(&rel, "train agent")?;
            run.record(&log_rel, "train agent")?;
            info!("seed {seed}: wrote {}", rel.display());
        }
    }
    Ok(())
}

fn eval(run: &mut Run) -> Result<()> {
    let tag = reward_tag(&run.cfg);
    let mut records: Vec<MetricsRecord> = Vec::new();
    for seed in run.cfg.seeds.clone() {
        let test = run.dataset(seed, "test", "eval")?;
        let ood = match run.cfg.ood {
            Some(_) => Some(run.dataset(seed, "ood", "eval")?),
            None => None,
        };
        let detector = if run.cfg.needs_detector() { Some(run.detector(seed, "eval")?) } else { None };
        let oracle = run.oracle(seed);
        for budget in run.cfg.budgets.clone() {
            let net = match run.cfg.policy {
                PolicyKind::Rl => {
                    let name = format!("policy_b{budget}_{tag}.ckpt");
                    Some(PolicyNetwork::from_checkpoint(&run.checkpoint(seed, &name, "eval", "train agent")?)?)
                }
                _ => None,
            };
            records.push(harness::evaluate_budget(
                &run.cfg,
                &oracle,
                detector.as_ref(),
                net.as_ref(),
                &test,
                ood.as_ref(),
                budget,
                seed,
            )?);
        }
    }
    let stem = format!("metrics_{}_{tag}", run.cfg.policy.name());
    let csv = PathBuf::from(format!("{stem}.csv"));
    let jsonl = PathBuf::from(format!("{stem}.jsonl"));
    let summary = PathBuf::from(format!("summary_{}_{tag}.csv", run.cfg.policy.name()));
    write_metrics_csv(&run.dir.join(&csv), &records)?;
    write_metrics_jsonl(&run.dir.join(&jsonl), &records)?;
    write_summary_csv(&run.dir.join(&summary), &summarize(&records))?;
    for rel in [&csv, &jsonl, &summary] {
        run.record(rel, "eval")?;
    }
    for r in &records {
        println!(
            "{} detector={} seed={} budget={} accuracy={} mse={} auroc={} return={:.4}",
            r.policy,
            r.detector_reward,
            r.seed,
            r.budget,
            fmt_opt(r.accuracy),
            fmt_opt(r.mse),
            fmt_opt(r.auroc),
            r.mean_return
        );
    }
    info!("{} records written", records.len());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Rows of `f0..f{d-1}` values and `mask0..mask{d-1}` bits.
fn read_partial_observations(path: &Path, d: usize) -> Result<Vec<(Vec<f64>, ObservationMask)>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rd.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| usage(format!("{}: missing column `{name}`", path.display())))
    };
    let f_cols = (0..d).map(|i| col(&format!("f{i}"))).collect::<Result<Vec<_>>>()?;
    let m_cols = (0..d).map(|i| col(&format!("mask{i}"))).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let mut bits = Vec::with_capacity(d);
        for &c in &m_cols {
            bits.push(match rec[c].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(usage(format!("{}:{row}: mask value `{other}` is not 0/1", path.display()))),
            });
        }
        let mut x = Vec::with_capacity(d);
        for (i, &c) in f_cols.iter().enumerate() {
            let s = rec[c].trim();
            x.push(if !bits[i] && s.is_empty() {
                0.0
            } else {
                s.parse::<f64>()
                    .map_err(|e| usage(format!("{}:{row}: bad value `{s}` in f{i}: {e}", path.display())))?
            });
        }
        out.push((x, ObservationMask::from_bits(bits)));
    }
    Ok(out)
}

fn detect(run: &Run, input: &Path, seed: Option<u64>, tau: Option<f64>, output: Option<&Path>) -> Result<()> {
    let seed = seed.unwrap_or(run.cfg.seeds[0]);
    let detector = run.detector(seed, "detect")?;
    let rows = read_partial_observations(input, run.cfg.task.dim())?;
    let mut out: Box<dyn Write> = match output {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["row", "observed", "log_prob", "tau", "ood"])?;
    let mut flagged = 0;
    for (i, (x, m)) in rows.iter().enumerate() {
        let lp = detector.log_prob(x, m);
        let t = tau.unwrap_or_else(|| detector.calibration().bucket(m.count()).tau);
        let is_ood = lp < t;
        flagged += is_ood as usize;
        w.write_record([i.to_string(), m.count().to_string(), lp.to_string(), t.to_string(), (is_ood as u8).to_string()])?;
    }
    w.flush()?;
    drop(w);
    out.flush()?;
    info!("{flagged} of {} rows flagged as out-of-distribution", rows.len());
    Ok(())
}

fn report(run: &mut Run) -> Result<()> {
    let mut records = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(&run.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("metrics_") && name.ends_with(".jsonl")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Dependency(format!("no metrics in {}; run `eval` first", run.dir.display())).into());
    }
    for f in &files {
        let key = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        run.manifest.verify(&run.dir, &key, "report", "eval")?;
        for (i, line) in std::fs::read_to_string(f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: MetricsRecord =
                serde_json::from_str(line).with_context(|| format!("{}:{}", f.display(), i + 1))?;
            records.push(r);
        }
    }
    let rows = summarize(&records);
    let rel = PathBuf::from("report.csv");
    write_summary_csv(&run.dir.join(&rel), &rows)?;
    run.record(&rel, "report")?;
    println!("{:<8} {:<4} {:>6} {:>5} {:>16} {:>16} {:>16}", "policy", "det", "budget", "seeds", "accuracy", "mse", "auroc");
    let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "-".into(),
    };
    for r in &rows {
        println!(
            "{:<8} {:<4} {:>6} {:>5} {:>16} {:>16} {:>16}",
            r.policy,
            r.detector_reward,
            r.budget,
            r.seeds,
            pm(r.accuracy_mean, r.accuracy_std),
            pm(r.mse_mean, r.mse_std),
            pm(r.auroc_mean, r.auroc_std)
        );
    }
    Ok(())
}
