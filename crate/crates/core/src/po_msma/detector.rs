//! Score model + density model + per-cardinality calibration.

use super::{
    DoseModel, DoseTrainConfig, MaskDistribution, MlpScoreModel, PoMsmaError, ScoreFunction,
};
use crate::data_env::{Dataset, ObservationMask, RewardSign};
use crate::math;
use crate::rng;
use std::fmt::Write as _;

/// In-distribution log-prob summary for one mask cardinality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStats {
    pub mean: f64,
    pub std: f64,
    /// Detection threshold: out iff log-prob < tau.
    pub tau: f64,
    pub count: usize,
}

/// Buckets indexed by `|m|` in `0..=d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub quantile: f64,
    pub buckets: Vec<BucketStats>,
}

impl Calibration {
    pub fn bucket(&self, cardinality: usize) -> &BucketStats {
        &self.buckets[cardinality.min(self.buckets.len() - 1)]
    }

    /// `k mean std tau count` per line after a header.
    pub fn to_text(&self) -> String {
        let mut s = format!("# calibration quantile {}\n# k mean std tau count\n", self.quantile);
        for (k, b) in self.buckets.iter().enumerate() {
            let _ = writeln!(s, "{k} {} {} {} {}", b.mean, b.std, b.tau, b.count);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PoMsmaError> {
        let mut quantile = None;
        let mut buckets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# calibration quantile ") {
                quantile = rest.trim().parse().ok();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || PoMsmaError::Shape(format!("calibration line {}: `{line}`", i + 1));
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 5 || p[0].parse::<usize>().ok() != Some(buckets.len()) {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            buckets.push(BucketStats {
                mean: f(p[1])?,
                std: f(p[2])?,
                tau: f(p[3])?,
                count: p[4].parse().map_err(|_| bad())?,
            });
        }
        if buckets.is_empty() {
            return Err(PoMsmaError::Shape("calibration has no buckets".into()));
        }
        Ok(Calibration { quantile: quantile.unwrap_or(0.05), buckets })
    }
}

/// How the DoSE log-likelihood is turned into a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorRewardForm {
    /// `sign * beta * z`, `z` the log-prob standardized within its cardinality bucket.
    Standardized,
    /// `sign * beta * exp(log_prob - bucket mean)`, the likelihood relative to a typical input.
    RawLikelihood,
}

impl DetectorRewardForm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standardized" | "log" => Some(DetectorRewardForm::Standardized),
            "raw" | "likelihood" => Some(DetectorRewardForm::RawLikelihood),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorRewardForm::Standardized => "standardized",
            DetectorRewardForm::RawLikelihood => "raw",
        }
    }
}

/// Trained, frozen PO-MSMA detector.
#[derive(Debug, Clone)]
pub struct PoMsmaDetector {
    score: MlpScoreModel,
    dose: DoseModel,
    calibration: Calibration,
}

impl PoMsmaDetector {
    pub fn new(score: MlpScoreModel, dose: DoseModel, calibration: Calibration) -> Self {
        PoMsmaDetector { score, dose, calibration }
    }

    pub fn score_model(&self) -> &MlpScoreModel {
        &self.score
    }

    pub fn dose(&self) -> &DoseModel {
        &self.dose
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn dim(&self) -> usize {
        self.score.dim()
    }

    pub fn statistics(&self, values: &[f64], mask: &ObservationMask) -> Vec<f64> {
        super::summary_statistics(&self.score, values, mask)
    }

    /// `log p(s_1..s_L | m)` of the input's summary statistics.
    pub fn log_prob(&self, values: &[f64], mask: &ObservationMask) -> f64 {
        self.dose.log_prob(&self.statistics(values, mask), mask)
    }

    /// Log-probs for many inputs, batching the score network per level.
    pub fn log_prob_rows(&self, values: &[Vec<f64>], masks: &[ObservationMask]) -> Vec<f64> {
        let stats = self.score.summary_statistics_rows(values, masks);
        stats.iter().zip(masks).map(|(s, m)| self.dose.log_prob(s, m)).collect()
    }

    /// `true` means flagged out-of-distribution.
    pub fn detect(&self, values: &[f64], mask: &ObservationMask, tau: f64) -> bool {
        self.log_prob(values, mask) < tau
    }

    /// Detection against the calibrated threshold of the mask's cardinality.
    pub fn detect_calibrated(&self, values: &[f64], mask: &ObservationMask) -> bool {
        self.detect(values, mask, self.calibration.bucket(mask.count()).tau)
    }

    /// Log-prob standardized by the in-distribution bucket of the same cardinality.
    pub fn standardized(&self, log_prob: f64, cardinality: usize) -> f64 {
        let b = self.calibration.bucket(cardinality);
        if b.std > 1e-12 {
            (log_prob - b.mean) / b.std
        } else {
            0.0
        }
    }

    pub fn reward_from_log_prob(
        &self,
        log_prob: f64,
        cardinality: usize,
        sign: RewardSign,
        beta: f64,
        form: DetectorRewardForm,
    ) -> f64 {
        if beta == 0.0 {
            return 0.0;
        }
        let v = match form {
            DetectorRewardForm::Standardized => self.standardized(log_prob, cardinality),
            DetectorRewardForm::RawLikelihood => {
                (log_prob - self.calibration.bucket(cardinality).mean).min(50.0).exp()
            }
        };
        sign.value() * beta * v
    }

    pub fn detector_reward(
        &self,
        values: &[f64],
        mask: &ObservationMask,
        sign: RewardSign,
        beta: f64,
        form: DetectorRewardForm,
    ) -> f64 {
        if beta == 0.0 {
            return 0.0;
        }
        self.reward_from_log_prob(self.log_prob(values, mask), mask.count(), sign, beta, form)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub dose: DoseTrainConfig,
    /// `(x, m)` pairs drawn to fit the density model.
    pub dose_samples: usize,
    /// Validation draws per cardinality bucket for calibration.
    pub calibration_per_bucket: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            dose: DoseTrainConfig::default(),
            dose_samples: 20_000,
            calibration_per_bucket: 500,
            quantile: 0.05,
            seed: 0,
        }
    }
}

/// Draw `n` `(x, m)` pairs from `data` under `masks`.
pub fn sample_pairs(
    data: &Dataset,
    masks: &MaskDistribution,
    n: usize,
    rng: &mut rng::Rng,
) -> (Vec<Vec<f64>>, Vec<ObservationMask>) {
    use rand::Rng as _;
    let mut xs = Vec::with_capacity(n);
    let mut ms = Vec::with_capacity(n);
    for _ in 0..n {
        let row = &data.rows()[rng.gen_range(0..data.len())];
        let m = masks.sample(data.dim(), rng);
        xs.push(m.apply(&row.x));
        ms.push(m);
    }
    (xs, ms)
}

/// Fit the density model on training statistics.
pub fn train_dose(
    score: &MlpScoreModel,
    data: &Dataset,
    masks: &MaskDistribution,
    cfg: &DetectorTrainConfig,
) -> Result<DoseModel, PoMsmaError> {
    if data.is_empty() {
        return Err(PoMsmaError::EmptyData);
    }
    let mut r = rng::stream(cfg.seed, "dose/pairs", 0);
    let (xs, ms) = sample_pairs(data, masks, cfg.dose_samples, &mut r);
    let stats = score.summary_statistics_rows(&xs, &ms);
    let dose_cfg = DoseTrainConfig { seed: cfg.seed, ..cfg.dose.clone() };
    DoseModel::train(&stats, &ms, &dose_cfg)
}

/// Per-cardinality means, stds and thresholds from validation data.
pub fn calibrate(
    score: &MlpScoreModel,
    dose: &DoseModel,
    validation: &Dataset,
    cfg: &DetectorTrainConfig,
) -> Result<Calibration, PoMsmaError> {
    if validation.is_empty() {
        return Err(PoMsmaError::EmptyData);
    }
    let d = validation.dim();
    let mut buckets = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let mut r = rng::stream(cfg.seed, "calibration", k as u64);
        let (xs, ms) = sample_pairs(validation, &MaskDistribution::Cardinality(k), cfg.calibration_per_bucket, &mut r);
        let stats = score.summary_statistics_rows(&xs, &ms);
        let lp: Vec<f64> = stats.iter().zip(&ms).map(|(s, m)| dose.log_prob(s, m)).collect();
        let mean = math::mean(&lp);
        let var = lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lp.len() as f64;
        buckets.push(BucketStats { mean, std: var.sqrt(), tau: math::quantile(&lp, cfg.quantile), count: lp.len() });
    }
    Ok(Calibration { quantile: cfg.quantile, buckets })
}

/// Dose fit followed by calibration.
pub fn train_detector(
    score: MlpScoreModel,
    train: &Dataset,
    validation: &Dataset,
    cfg: &DetectorTrainConfig,
) -> Result<PoMsmaDetector, PoMsmaError> {
    let dose = train_dose(&score, train, &MaskDistribution::UniformCardinality, cfg)?;
    let calibration = calibrate(&score, &dose, validation, cfg)?;
    Ok(PoMsmaDetector::new(score, dose, calibration))
}

/// Mann-Whitney AUROC with in-distribution as the positive class; ties count half.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64, PoMsmaError> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(PoMsmaError::EmptyData);
    }
    if in_scores.iter().chain(out_scores).any(|v| v.is_nan()) {
        return Err(PoMsmaError::Shape("AUROC scores must not be NaN".into()));
    }
    let mut all: Vec<(f64, bool)> =
        in_scores.iter().map(|&v| (v, true)).chain(out_scores.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of midranks of the positive class
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (in_scores.len() as f64, out_scores.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.2], &[0.8, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn calibration_text_round_trip() {
        let c = Calibration {
            quantile: 0.05,
            buckets: vec![
                BucketStats { mean: 1.5, std: 0.25, tau: 1.0, count: 10 },
                BucketStats { mean: -3.125, std: 1e-3, tau: -4.0, count: 7 },
            ],
        };
        assert_eq!(Calibration::from_text(&c.to_text()).unwrap(), c);
        assert!(Calibration::from_text("0 1 2 x 4").is_err());
    }
}
