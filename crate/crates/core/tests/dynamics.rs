use nalgebra::DMatrix;
use proptest::prelude::*;
use rafa_core::data_env::{ar1_covariance, ObservationMask, PartialState, SyntheticTaskSpec};
use rafa_core::dynamics::{estimate_mi, BinarySymmetricChannel, GaussianMixtureOracle};
use rafa_core::math;
use rafa_core::rng::stream;
use rand::seq::SliceRandom;

/// Classes at ±mu on dim 0, dim 1 pure noise.
fn decisive_task(mu: f64) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new(vec![vec![mu, 0.0], vec![-mu, 0.0]], vec![DMatrix::identity(2, 2)], vec![0.5, 0.5], 3)
        .unwrap()
}

/// `H(y) - ∫ p(x) H(y|x) dx` for two unit-variance classes at ±mu with equal priors,
/// by the trapezoid rule on `points` nodes over [-mu-12, mu+12].
fn quadrature_info_gain(mu: f64, points: usize) -> f64 {
    let (lo, hi) = (-mu - 12.0, mu + 12.0);
    let h = (hi - lo) / (points - 1) as f64;
    let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = 0.0;
    for k in 0..points {
        let x = lo + k as f64 * h;
        let (a, b) = (0.5 * pdf(x, mu), 0.5 * pdf(x, -mu));
        let px = a + b;
        let mut hx = 0.0;
        for q in [a / px, b / px] {
            if q > 0.0 {
                hx -= q * q.ln();
            }
        }
        let w = if k == 0 || k == points - 1 { 0.5 } else { 1.0 };
        acc += w * px * hx;
    }
    std::f64::consts::LN_2 - acc * h
}

fn four_class_task() -> SyntheticTaskSpec {
    let means = vec![
        vec![1.0, 1.0, 0.5, 0.0, 0.0, 0.0],
        vec![-1.0, 1.0, -0.5, 0.3, 0.0, 0.0],
        vec![1.0, -1.0, 0.0, -0.3, 0.2, 0.0],
        vec![-1.0, -1.0, 0.5, 0.0, -0.2, 0.0],
    ];
    SyntheticTaskSpec::new(means, vec![ar1_covariance(6, 0.5)], vec![0.25; 4], 11).unwrap()
}

#[test]
fn info_gain_matches_quadrature() {
    let mu = 1.0;
    let exact = quadrature_info_gain(mu, 10_000);
    let oracle = GaussianMixtureOracle::from_spec(&decisive_task(mu), 100_000);
    let mut rng = stream(5, "quad", 0);
    let u = oracle.expected_info_gain(&[0.0, 0.0], &ObservationMask::empty(2), 0, &mut rng).unwrap();
    assert!((u - exact).abs() < 0.01, "mc {u} vs quadrature {exact}");
}

#[test]
fn info_gain_error_shrinks_like_inverse_sqrt() {
    let mu = 1.0;
    let exact = quadrature_info_gain(mu, 10_000);
    let task = decisive_task(mu);
    let rmse = |s: usize| {
        let o = GaussianMixtureOracle::from_spec(&task, s);
        let reps = 60;
        let sq: f64 = (0..reps)
            .map(|r| {
                let mut rng = stream(s as u64, "rate", r);
                let u = o.expected_info_gain(&[0.0; 2], &ObservationMask::empty(2), 0, &mut rng).unwrap();
                (u - exact).powi(2)
            })
            .sum();
        (sq / reps as f64).sqrt()
    };
    let e = [rmse(100), rmse(1000), rmse(10_000)];
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        // sqrt(10) = 3.16; allow sampling slack on the RMSE itself
        assert!((1.8..5.5).contains(&ratio), "errors {e:?}");
    }
}

#[test]
fn kl_utility_agrees_with_info_gain() {
    let task = four_class_task();
    let o = GaussianMixtureOracle::from_spec(&task, 10_000);
    let x = task.sample(1, &mut stream(1, "x", 0)).rows()[0].x.clone();
    for mask in [ObservationMask::empty(6), ObservationMask::from_indices(6, &[0, 3]).unwrap()] {
        let vals = mask.apply(&x);
        for j in mask.unobserved() {
            let u = o.expected_info_gain(&vals, &mask, j, &mut stream(2, "u", j as u64)).unwrap();
            let g = o.greedy_utility(&vals, &mask, j, &mut stream(3, "g", j as u64)).unwrap();
            assert!((u - g).abs() < 0.02, "feature {j}: U {u} KL {g}");
        }
    }
}

#[test]
fn noise_dimension_has_no_information() {
    let o = GaussianMixtureOracle::from_spec(&decisive_task(1.5), 256);
    let mut rng = stream(9, "noise", 0);
    for _ in 0..20 {
        let u = o.expected_info_gain(&[0.0; 2], &ObservationMask::empty(2), 1, &mut rng).unwrap();
        assert!(u.abs() < 0.01);
        let g = o.greedy_utility(&[0.0; 2], &ObservationMask::empty(2), 1, &mut rng).unwrap();
        assert!(g.abs() < 0.01);
    }
}

#[test]
fn intermediate_rewards_telescope() {
    let task = four_class_task();
    let o = GaussianMixtureOracle::from_spec(&task, 16);
    let data = task.sample(30, &mut stream(4, "tele", 0));
    let mut rng = stream(4, "order", 0);
    for inst in data.rows() {
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rng);
        let mut state = PartialState::empty(6);
        let h0 = o.conditional_entropy(state.values(), state.mask()).unwrap();
        assert!((h0 - 4f64.ln()).abs() < 1e-12);
        let mut sum = 0.0;
        for &i in &order[..4] {
            let next = PartialState::observe(&inst.x, state.mask().with(i).unwrap());
            sum += o.intermediate_reward(&state, &next, i).unwrap();
            state = next;
        }
        let hf = o.conditional_entropy(state.values(), state.mask()).unwrap();
        assert!((sum - (h0 - hf)).abs() < 1e-9);
    }
}

#[test]
fn air_rewards_telescope() {
    let task = SyntheticTaskSpec::new(vec![vec![0.0; 5]], vec![ar1_covariance(5, 0.8)], vec![1.0], 0).unwrap();
    let o = GaussianMixtureOracle::from_spec(&task, 16);
    let data = task.sample(10, &mut stream(6, "air", 0));
    for inst in data.rows() {
        let mut mask = ObservationMask::empty(5);
        let mut sum = 0.0;
        for i in [3, 0, 4] {
            sum += o.air_intermediate_reward(&inst.x, &mask, i).unwrap();
            mask.insert(i).unwrap();
        }
        let start = o.log_density_unobserved(&inst.x, &ObservationMask::empty(5)).unwrap() / 5.0;
        let end = o.log_density_unobserved(&inst.x, &mask).unwrap() / 2.0;
        assert!((sum - (end - start)).abs() < 1e-9);
    }
}

#[test]
fn auxiliary_info_shapes() {
    let task = four_class_task();
    let o = GaussianMixtureOracle::from_spec(&task, 64);
    let x = task.sample(1, &mut stream(1, "x", 1)).rows()[0].x.clone();
    let mask = ObservationMask::from_indices(6, &[1, 4]).unwrap();
    let aux = o.query(&mask.apply(&x), &mask, &mut stream(1, "q", 0)).unwrap();
    assert!((aux.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(aux.prediction, math::argmax(&aux.posterior));
    for i in [1, 4] {
        assert_eq!(aux.utilities[i], 0.0);
        assert_eq!(aux.imputed_var[i], 0.0);
    }
    assert!(aux.imputed_var.iter().all(|&v| v >= 0.0));
}

#[test]
fn full_acquisition_reaches_joint_bayes_posterior() {
    let task = four_class_task();
    let o = GaussianMixtureOracle::from_spec(&task, 16);
    let data = task.sample(1, &mut stream(2, "x", 0));
    let inst = &data.rows()[0];
    let mut mask = ObservationMask::empty(6);
    for i in [5, 2, 0, 3, 1, 4] {
        mask.insert(i).unwrap();
    }
    let p = o.posterior(&mask.apply(&inst.x), &mask).unwrap();
    let full = o.posterior(&inst.x, &ObservationMask::full(6)).unwrap();
    for (a, b) in p.iter().zip(&full) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn channel_mi_matches_closed_form() {
    let ch = BinarySymmetricChannel::new(0.1);
    let exact = std::f64::consts::LN_2 - math::entropy(&[0.1, 0.9]);
    assert!((exact - 0.3681).abs() < 1e-4);
    assert!((ch.mutual_information() - exact).abs() < 1e-15);
    let v = ch.sample(100_000, &mut stream(7, "bsc", 0));
    let mi = estimate_mi(&ch, v.rows(), 0).unwrap();
    assert!((mi - exact).abs() < 0.01, "{mi}");
    let noise = estimate_mi(&ch, v.rows(), 1).unwrap();
    assert!(noise.abs() < 0.02);
    // noiseless channel: x_0 determines y
    let ch = BinarySymmetricChannel::new(0.0);
    let v = ch.sample(20_000, &mut stream(7, "bsc", 1));
    let mi = estimate_mi(&ch, v.rows(), 0).unwrap();
    assert!((mi - std::f64::consts::LN_2).abs() < 0.01);
}

#[test]
fn gaussian_noise_dim_mi_is_zero() {
    let task = decisive_task(1.0);
    let o = GaussianMixtureOracle::from_spec(&task, 16);
    let v = task.sample(100_000, &mut stream(8, "v", 0));
    let mi = estimate_mi(&o, v.rows(), 1).unwrap();
    assert!(mi.abs() < 0.02, "{mi}");
    let mi0 = estimate_mi(&o, v.rows(), 0).unwrap();
    assert!((mi0 - quadrature_info_gain(1.0, 10_000)).abs() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn info_gain_is_nonnegative(seed in 0u64..1000, bits in proptest::collection::vec(any::<bool>(), 6)) {
        let task = four_class_task();
        let o = GaussianMixtureOracle::from_spec(&task, 1024);
        let x = task.sample(1, &mut stream(seed, "x", 0)).rows()[0].x.clone();
        let mask = ObservationMask::from_bits(bits);
        let vals = mask.apply(&x);
        let p = o.posterior(&vals, &mask).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rng = stream(seed, "u", 0);
        for j in mask.unobserved() {
            let u = o.expected_info_gain(&vals, &mask, j, &mut rng).unwrap();
            prop_assert!(u >= -0.02, "U_{} = {}", j, u);
        }
    }
}
