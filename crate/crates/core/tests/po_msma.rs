use nalgebra::DMatrix;
use proptest::prelude::*;
use rafa_core::data_env::{ar1_covariance, Dataset, ObservationMask, RewardSign, SyntheticTaskSpec};
use rafa_core::math::LN_2PI;
use rafa_core::po_msma::*;
use rafa_core::rng::{stream, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn unit_gaussian(d: usize) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new(vec![vec![0.0; d]], vec![DMatrix::identity(d, d)], vec![1.0], 0).unwrap()
}

fn quick_score(data: &Dataset, steps: usize, seed: u64) -> MlpScoreModel {
    let cfg = ScoreTrainConfig { steps, hidden: vec![32, 32], seed, ..Default::default() };
    MlpScoreModel::train(data, NoiseSchedule::default(), &MaskDistribution::UniformCardinality, &cfg).unwrap().0
}

#[test]
fn schedule_is_geometric_and_decreasing() {
    let s = NoiseSchedule::default();
    assert_eq!(s.levels(), 10);
    assert!((s.sigma(0) - 1.0).abs() < 1e-12 && (s.sigma(9) - 0.01).abs() < 1e-12);
    let r = s.sigma(1) / s.sigma(0);
    for i in 1..10 {
        assert!(s.sigma(i) < s.sigma(i - 1));
        assert!((s.sigma(i) / s.sigma(i - 1) - r).abs() < 1e-12);
    }
    assert!(NoiseSchedule::from_sigmas(vec![0.5, 0.5]).is_err());
    assert!(NoiseSchedule::from_sigmas(vec![1.0, -0.1]).is_err());
}

#[test]
fn analytic_score_closed_forms() {
    let spec = unit_gaussian(1);
    let full = ObservationMask::full(1);
    let s = analytic_gaussian_score(&spec, &[1.0], &full, 1.0).unwrap();
    assert!((s[0] + 0.5).abs() < 1e-12);
    for &x in &[-2.0, 0.3, 2.5] {
        for &sigma in &[0.1, 0.5, 1.0] {
            let s = analytic_gaussian_score(&spec, &[x], &full, sigma).unwrap();
            assert!((s[0] + x / (1.0 + sigma * sigma)).abs() < 1e-12);
        }
    }
    let spec = SyntheticTaskSpec::new(vec![vec![0.4, -1.0, 2.0]], vec![ar1_covariance(3, 0.7)], vec![1.0], 0).unwrap();
    let at_mean = analytic_gaussian_score(&spec, &[0.4, -1.0, 2.0], &ObservationMask::full(3), 0.3).unwrap();
    assert!(at_mean.iter().all(|v| v.abs() < 1e-12));
    let mixture = rafa_core::benchmark::standard_task(0);
    assert!(analytic_gaussian_score(&mixture, &[0.0; 16], &ObservationMask::full(16), 0.5).is_err());
}

#[test]
fn analytic_score_respects_marginalization() {
    // the score on m equals the score of the Gaussian marginal over m
    let cov = ar1_covariance(4, 0.6);
    let spec = SyntheticTaskSpec::new(vec![vec![0.1, 0.2, -0.3, 0.4]], vec![cov.clone()], vec![1.0], 0).unwrap();
    let keep = [0usize, 2];
    let mask = ObservationMask::from_indices(4, &keep).unwrap();
    let x = [1.0, 99.0, -0.5, 99.0];
    let sigma = 0.4;
    let s = analytic_gaussian_score(&spec, &x, &mask, sigma).unwrap();
    let sub = DMatrix::from_fn(2, 2, |i, j| cov[(keep[i], keep[j])]);
    let marginal = SyntheticTaskSpec::new(vec![vec![0.1, -0.3]], vec![sub], vec![1.0], 0).unwrap();
    let t = analytic_gaussian_score(&marginal, &[1.0, -0.5], &ObservationMask::full(2), sigma).unwrap();
    assert!((s[0] - t[0]).abs() < 1e-12 && (s[2] - t[1]).abs() < 1e-12);
    assert_eq!(s[1], 0.0);
    assert_eq!(s[3], 0.0);
}

#[test]
fn norms_vanish_on_empty_masks() {
    let data = unit_gaussian(3).sample(500, &mut stream(1, "d", 0));
    let model = quick_score(&data, 50, 1);
    let stats = summary_statistics(&model, &[0.3, -2.0, 1.0], &ObservationMask::empty(3));
    assert_eq!(stats, vec![0.0; 10]);
}

#[test]
fn score_training_fits_the_one_dim_closed_form() {
    let data = unit_gaussian(1).sample(20_000, &mut stream(2, "d", 0));
    let cfg = ScoreTrainConfig { steps: 6000, seed: 2, ..Default::default() };
    let (model, report) =
        MlpScoreModel::train(&data, NoiseSchedule::default(), &MaskDistribution::Fixed(ObservationMask::full(1)), &cfg)
            .unwrap();
    assert!(report.final_loss.is_finite());
    let mask = ObservationMask::full(1);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=60 {
        let x = -3.0 + 0.1 * k as f64;
        // level 0 is sigma = 1
        let want = -x / 2.0;
        let got = model.score(&[x], &mask, 0)[0];
        num += (got - want).powi(2);
        den += want * want;
    }
    let rel = (num / den).sqrt();
    assert!(rel <= 0.1, "relative L2 error {rel}");
    // smoothed loss trends down
    let curve = &report.smoothed_loss;
    assert!(curve.last().unwrap() < &curve[0]);
}

#[test]
fn population_objective_floor_at_the_true_score() {
    // For N(0, 1) data at the true smoothed score the per-sample objective is
    // ½σ²‖s + ε/σ‖² with s = -x̃/(1+σ²), whose mean is ½σ²·(1/σ² - 1/(1+σ²)).
    let mut rng = stream(3, "mc", 0);
    for &sigma in &[0.1f64, 0.5, 1.0] {
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let xt = x + sigma * e;
            let s = -xt / (1.0 + sigma * sigma);
            acc += 0.5 * sigma * sigma * (s + e / sigma).powi(2);
        }
        let floor = 0.5 * sigma * sigma * (1.0 / (sigma * sigma) - 1.0 / (1.0 + sigma * sigma));
        assert!((acc / n as f64 - floor).abs() < 0.01 * floor.max(0.05), "sigma {sigma}");
    }
}

#[test]
fn empty_mask_contributes_no_loss() {
    let data = unit_gaussian(2).sample(200, &mut stream(4, "d", 0));
    let cfg = ScoreTrainConfig { steps: 30, hidden: vec![8], ema: 0.0, seed: 4, ..Default::default() };
    let fixed = MaskDistribution::Fixed(ObservationMask::empty(2));
    let (model, report) = MlpScoreModel::train(&data, NoiseSchedule::default(), &fixed, &cfg).unwrap();
    assert_eq!(report.final_loss, 0.0);
    // nothing was learned either
    let (init, _) = MlpScoreModel::train(
        &data,
        NoiseSchedule::default(),
        &fixed,
        &ScoreTrainConfig { steps: 0, ..cfg.clone() },
    )
    .unwrap();
    assert_eq!(model.net().params(), init.net().params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unobserved_entries_never_matter(seed in 0u64..1000, junk in -50.0f64..50.0) {
        thread_local! {
            static MODEL: MlpScoreModel = {
                let data = unit_gaussian(5).sample(500, &mut stream(5, "d", 0));
                quick_score(&data, 100, 5)
            };
        }
        let mut rng = stream(seed, "fuzz", 0);
        let mask = MaskDistribution::UniformCardinality.sample(5, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut y = x.clone();
        for i in mask.unobserved() {
            y[i] = junk + i as f64;
        }
        MODEL.with(|m| -> Result<(), TestCaseError> {
            for level in 0..10 {
                let a = masked_score(m, &x, &mask, level);
                let b = masked_score(m, &y, &mask, level);
                prop_assert_eq!(&a, &b);
                for i in mask.unobserved() {
                    prop_assert_eq!(a.0[i], 0.0);
                }
            }
            let sa = summary_statistics(m, &x, &mask);
            prop_assert!(sa.iter().all(|&s| s >= 0.0));
            prop_assert_eq!(sa, summary_statistics(m, &y, &mask));
            let rows = m.summary_statistics_rows(&[x.clone(), y.clone()], &[mask.clone(), mask.clone()]);
            prop_assert_eq!(&rows[0], &rows[1]);
            Ok(())
        })?;
    }
}

/// Two correlated statistics: `s1 ~ N(2, 0.5²)`, `s2 | s1 ~ N(0.5 s1 + 1, 0.3²)`.
fn two_level_draws(n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let s1 = 2.0 + 0.5 * a;
            vec![s1, 0.5 * s1 + 1.0 + 0.3 * b]
        })
        .collect()
}

fn two_level_true_log_prob(s: &[f64]) -> f64 {
    let lp = |x: f64, m: f64, sd: f64| -0.5 * (LN_2PI + 2.0 * sd.ln() + ((x - m) / sd).powi(2));
    lp(s[0], 2.0, 0.5) + lp(s[1], 0.5 * s[0] + 1.0, 0.3)
}

fn fit_two_level(train: &[Vec<f64>], seed: u64) -> DoseModel {
    let masks = vec![ObservationMask::full(2); train.len()];
    let cfg = DoseTrainConfig { hidden: vec![32, 32], epochs: 30, batch: 128, lr: 3e-3, seed };
    DoseModel::train(train, &masks, &cfg).unwrap()
}

#[test]
fn dose_recovers_a_known_density() {
    let train = two_level_draws(20_000, &mut stream(6, "train", 0));
    let test = two_level_draws(10_000, &mut stream(6, "test", 0));
    let dose = fit_two_level(&train, 6);
    let mask = ObservationMask::full(2);
    let fitted: f64 = test.iter().map(|s| dose.log_prob(s, &mask)).sum::<f64>() / test.len() as f64;
    let truth: f64 = test.iter().map(|s| two_level_true_log_prob(s)).sum::<f64>() / test.len() as f64;
    assert!((fitted - truth).abs() <= 0.05, "fitted {fitted} true {truth}");

    // permuting the training order barely moves the fit
    let mut shuffled = train.clone();
    let mut r = stream(6, "perm", 0);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, r.gen_range(0..=i));
    }
    let other = fit_two_level(&shuffled, 6);
    let fitted2: f64 = test.iter().map(|s| other.log_prob(s, &mask)).sum::<f64>() / test.len() as f64;
    assert!((fitted - fitted2).abs() <= 0.02, "{fitted} vs {fitted2}");

    // the Gaussian density at its conditional means is Σ -½ ln(2π v)
    let path = dose.mode_path(&mask);
    let peak: f64 = (0..2).map(|i| -0.5 * (LN_2PI + dose.conditional(&path, &mask, i).1.ln())).sum();
    assert!((dose.log_prob(&path, &mask) - peak).abs() < 1e-9);

    // log-density is the sum of its conditionals, re-evaluated one level at a time
    for s in test.iter().take(50) {
        let total: f64 = (0..2)
            .map(|i| {
                let (m, v) = dose.conditional(s, &mask, i);
                -0.5 * (LN_2PI + v.ln() + (s[i] - m).powi(2) / v)
            })
            .sum();
        assert!((total - dose.log_prob(s, &mask)).abs() < 1e-9);
        let terms = dose.log_prob_terms(s, &mask);
        assert!((terms.iter().sum::<f64>() - dose.log_prob(s, &mask)).abs() < 1e-12);
    }
    // level 0 ignores level 1
    let (a, _) = dose.conditional(&[2.0, -100.0], &mask, 0);
    let (b, _) = dose.conditional(&[2.0, 100.0], &mask, 0);
    assert_eq!(a, b);
}

#[test]
fn constant_statistics_use_the_variance_floor() {
    let stats = vec![vec![0.7, 0.7, 0.7]; 300];
    let masks = vec![ObservationMask::from_indices(4, &[1]).unwrap(); 300];
    let dose = DoseModel::train(&stats, &masks, &DoseTrainConfig { epochs: 2, ..Default::default() }).unwrap();
    assert!(dose.degenerate().iter().all(|d| *d == Some(0.7)));
    let peak = 3.0 * -0.5 * (LN_2PI + VARIANCE_FLOOR.ln());
    assert!((dose.log_prob(&[0.7, 0.7, 0.7], &masks[0]) - peak).abs() < 1e-9);
    assert!(dose.log_prob(&[0.71, 0.7, 0.7], &masks[0]) < peak);
}

fn small_detector(seed: u64, per_bucket: usize) -> (SyntheticTaskSpec, PoMsmaDetector) {
    let spec = SyntheticTaskSpec::new(vec![vec![0.0, 1.0, -1.0]], vec![ar1_covariance(3, 0.5)], vec![1.0], seed).unwrap();
    let train = spec.sample(3000, &mut stream(seed, "train", 0));
    let val = spec.sample(3000, &mut stream(seed, "val", 0));
    let score = quick_score(&train, 300, seed);
    let cfg = DetectorTrainConfig {
        dose: DoseTrainConfig { hidden: vec![16], epochs: 5, ..Default::default() },
        dose_samples: 3000,
        calibration_per_bucket: per_bucket,
        seed,
        ..Default::default()
    };
    (spec, train_detector(score, &train, &val, &cfg).unwrap())
}

#[test]
fn calibrated_threshold_controls_false_positives() {
    let (spec, det) = small_detector(7, 10_000);
    let fresh = spec.sample(10_000, &mut stream(7, "fresh", 0));
    let mut r = stream(7, "fresh-masks", 0);
    for k in 1..=3 {
        let (xs, ms) = sample_pairs(&fresh, &MaskDistribution::Cardinality(k), 10_000, &mut r);
        let flagged = xs.iter().zip(&ms).filter(|(x, m)| det.detect_calibrated(x, m)).count();
        let fpr = flagged as f64 / xs.len() as f64;
        assert!((fpr - 0.05).abs() <= 0.01, "cardinality {k}: fpr {fpr}");
    }
}

#[test]
fn thresholds_and_rewards() {
    let (spec, det) = small_detector(8, 200);
    let rows = spec.sample(50, &mut stream(8, "rows", 0));
    let mask = ObservationMask::from_indices(3, &[0, 2]).unwrap();
    for row in rows.rows() {
        let x = mask.apply(&row.x);
        assert!(!det.detect(&x, &mask, f64::NEG_INFINITY));
        assert!(det.detect(&x, &mask, f64::INFINITY));
        assert_eq!(det.log_prob(&x, &mask), det.log_prob(&x, &mask));
        for form in [DetectorRewardForm::Standardized, DetectorRewardForm::RawLikelihood] {
            assert_eq!(det.detector_reward(&x, &mask, RewardSign::Positive, 0.0, form), 0.0);
            let pos = det.detector_reward(&x, &mask, RewardSign::Positive, 0.7, form);
            let neg = det.detector_reward(&x, &mask, RewardSign::Negative, 0.7, form);
            assert_eq!(pos, -neg);
        }
    }
    let bucket = det.calibration().bucket(2).clone();
    assert_eq!(det.standardized(bucket.mean, 2), 0.0);
    assert_eq!(det.reward_from_log_prob(bucket.mean, 2, RewardSign::Positive, 1.0, DetectorRewardForm::Standardized), 0.0);
    let z = det.reward_from_log_prob(bucket.mean + bucket.std, 2, RewardSign::Positive, 0.5, DetectorRewardForm::Standardized);
    assert!((z - 0.5).abs() < 1e-12);
}

#[test]
fn auroc_matches_brute_force() {
    let mut rng = stream(9, "auroc", 0);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let m = rng.gen_range(1..40);
        // coarse values force ties
        let a: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..5.0f64)).round()).collect();
        let b: Vec<f64> = (0..m).map(|_| (rng.gen_range(-1.0..4.0f64)).round()).collect();
        let mut wins = 0.0;
        for x in &a {
            for y in &b {
                wins += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        let brute = wins / (n * m) as f64;
        assert!((auroc(&a, &b).unwrap() - brute).abs() < 1e-12);
    }
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(auroc(&[f64::NAN], &[1.0]).is_err());
}

#[test]
fn identical_distributions_give_chance_auroc() {
    let mut rng = stream(10, "chance", 0);
    let a: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
    assert!((auroc(&a, &b).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let (_, det) = small_detector(11, 100);
    let score = MlpScoreModel::from_checkpoint(&det.score_model().to_checkpoint()).unwrap();
    assert_eq!(&score, det.score_model());
    let text = det.dose().to_checkpoint().to_text();
    let dose = DoseModel::from_checkpoint(&rafa_core::checkpoint::Checkpoint::from_text(&text).unwrap()).unwrap();
    assert_eq!(&dose, det.dose());
    let cal = Calibration::from_text(&det.calibration().to_text()).unwrap();
    assert_eq!(&cal, det.calibration());
}
