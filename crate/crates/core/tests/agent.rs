use nalgebra::DMatrix;
use proptest::prelude::*;
use rafa_core::agent::*;
use rafa_core::data_env::{EpisodeConfig, Instance, ObservationMask, PartialState, SyntheticTaskSpec, TaskKind};
use rafa_core::dynamics::{AuxiliaryInfo, GaussianMixtureOracle};
use rafa_core::grouping::ActionGrouping;
use rafa_core::harness::EpisodeContext;
use rafa_core::math;
use rafa_core::nn::{Activation, Mlp};
use rafa_core::rng::{stream, Rng};
use rand::Rng as _;

fn grouping(d: usize, k: usize) -> ActionGrouping {
    let scores: Vec<f64> = (0..d).map(|i| (d - i) as f64).collect();
    ActionGrouping::build(&scores, k).unwrap()
}

fn aux_for(d: usize, classes: usize) -> AuxiliaryInfo {
    AuxiliaryInfo {
        posterior: vec![1.0 / classes as f64; classes],
        prediction: 0,
        utilities: vec![0.1; d],
        imputed_mean: vec![0.0; d],
        imputed_var: vec![1.0; d],
    }
}

/// A network whose actor outputs all-zero logits.
fn uniform_net(g: ActionGrouping, classes: usize, rng: &mut Rng) -> PolicyNetwork {
    let width = feature_width(g.dim(), classes);
    let out = g.num_groups() * (1 + g.group_size());
    let sizes = [width, 8, out];
    let n = Mlp::new(&sizes, Activation::Tanh, false, rng).num_params();
    let actor = Mlp::from_params(&sizes, Activation::Tanh, false, vec![0.0; n]).unwrap();
    let critic = Mlp::new(&[width, 8, 1], Activation::Tanh, false, rng);
    PolicyNetwork::from_parts(actor, critic, g, classes).unwrap()
}

fn random_state(d: usize, observed: usize, rng: &mut Rng) -> PartialState {
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..observed {
        let j = rng.gen_range(i..d);
        idx.swap(i, j);
    }
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    PartialState::observe(&x, ObservationMask::from_indices(d, &idx[..observed]).unwrap())
}

#[test]
fn forced_group_when_others_are_acquired() {
    let g = grouping(6, 3);
    let mut rng = stream(1, "test", 0);
    let net = PolicyNetwork::new(g.clone(), 2, &[16], &mut rng);
    let open = &g.groups()[1];
    let observed: Vec<usize> = (0..6).filter(|f| !open.contains(f)).collect();
    let state = PartialState::observe(&[0.5; 6], ObservationMask::from_indices(6, &observed).unwrap());
    for _ in 0..200 {
        let a = net.act(&state, &aux_for(6, 2), ActMode::Stochastic, &mut rng).unwrap();
        assert_eq!(a.group, 1);
        assert!(open.contains(&a.feature));
    }
}

#[test]
fn uniform_logits_give_uniform_features() {
    let g = grouping(6, 3);
    assert_eq!((g.num_groups(), g.group_size()), (3, 2));
    let mut rng = stream(2, "test", 0);
    let net = uniform_net(g, 2, &mut rng);
    let state = PartialState::empty(6);
    let aux = aux_for(6, 2);
    let draws = 100_000;
    let mut counts = [0usize; 6];
    for _ in 0..draws {
        counts[net.act(&state, &aux, ActMode::Stochastic, &mut rng).unwrap().feature] += 1;
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn sampled_actions_never_hit_observed_features() {
    let mut rng = stream(3, "test", 0);
    let mut draws = 0;
    for trial in 0..100 {
        let d = rng.gen_range(2..20);
        let k = rng.gen_range(1..=d);
        let g = grouping(d, k);
        let net = PolicyNetwork::new(g, 3, &[12], &mut stream(3, "net", trial));
        for _ in 0..10 {
            let state = random_state(d, rng.gen_range(0..d), &mut rng);
            for mode in [ActMode::Stochastic, ActMode::Deterministic] {
                for _ in 0..50 {
                    let a = net.act(&state, &aux_for(d, 3), mode, &mut rng).unwrap();
                    assert!(!state.mask().is_observed(a.feature));
                    draws += 1;
                }
            }
        }
    }
    assert_eq!(draws, 100_000);
}

#[test]
fn no_valid_action_is_an_error() {
    let mut rng = stream(4, "test", 0);
    let net = PolicyNetwork::new(grouping(4, 2), 2, &[8], &mut rng);
    let state = PartialState::observe(&[0.0; 4], ObservationMask::full(4));
    assert!(matches!(net.act(&state, &aux_for(4, 2), ActMode::Stochastic, &mut rng), Err(AgentError::NoValidAction)));
}

#[test]
fn deterministic_mode_breaks_ties_low() {
    let g = grouping(6, 3);
    let net = uniform_net(g.clone(), 2, &mut stream(5, "test", 0));
    let a = net.act(&PartialState::empty(6), &aux_for(6, 2), ActMode::Deterministic, &mut stream(5, "a", 0)).unwrap();
    assert_eq!((a.group, a.member), (0, 0));
    assert_eq!(a.feature, g.groups()[0][0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn joint_probabilities_sum_to_one(
        d in 2usize..14,
        kfrac in 0.0f64..1.0,
        seed in 0u64..10_000,
    ) {
        let k = 1 + (kfrac * (d - 1) as f64) as usize;
        let g = grouping(d, k);
        let mut rng = stream(seed, "prop", 0);
        let n_logits = g.num_groups() * (1 + g.group_size());
        let logits: Vec<f64> = (0..n_logits).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let state = random_state(d, rng.gen_range(0..d), &mut rng);
        let dist = ActionDistribution::new(&logits, &g, state.mask()).unwrap();
        let mut total = 0.0;
        for (gi, members) in g.groups().iter().enumerate() {
            for (ni, &f) in members.iter().enumerate() {
                let p = dist.log_prob(gi, ni).exp();
                if state.mask().is_observed(f) {
                    prop_assert_eq!(p, 0.0);
                }
                total += p;
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-6);
        // each stage normalizes on its own
        let pk: f64 = dist.group.iter().map(|l| l.exp()).sum();
        prop_assert!((pk - 1.0).abs() < 1e-9);
    }
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let g = grouping(7, 3);
    let mut rng = stream(6, "test", 0);
    let state = random_state(7, 3, &mut rng);
    let n_logits = g.num_groups() * (1 + g.group_size());
    let logits: Vec<f64> = (0..n_logits).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let dist = ActionDistribution::new(&logits, &g, state.mask()).unwrap();
    let action = dist.sample(ActMode::Stochastic, &mut rng);
    let (a, b) = (0.7, -0.3);
    let f = |l: &[f64]| {
        let d = ActionDistribution::new(l, &g, state.mask()).unwrap();
        a * d.log_prob(action.0, action.1) + b * d.entropy()
    };
    let mut grad = vec![0.0; n_logits];
    dist.logit_gradient(action, a, b, &mut grad);
    let h = 1e-6;
    for i in 0..n_logits {
        let mut up = logits.clone();
        up[i] += h;
        let mut dn = logits.clone();
        dn[i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        assert!((fd - grad[i]).abs() < 1e-6, "logit {i}: fd {fd} analytic {}", grad[i]);
    }
}

#[test]
fn surrogate_is_flat_where_clipped() {
    let eps = 0.2;
    let h = 1e-6;
    let slope = |r: f64, adv: f64| {
        (clipped_surrogate(r + h, adv, eps) - clipped_surrogate(r - h, adv, eps)) / (2.0 * h)
    };
    for &r in &[1.25, 1.5, 3.0] {
        assert_eq!(slope(r, 2.0), 0.0);
    }
    for &r in &[0.1, 0.5, 0.75] {
        assert_eq!(slope(r, -2.0), 0.0);
    }
    for &r in &[0.9, 1.0, 1.1] {
        assert!((slope(r, 2.0) - 2.0).abs() < 1e-6);
        assert!((slope(r, -2.0) + 2.0).abs() < 1e-6);
    }
}

/// Two features, one class; feature 0 costs 1 and feature 1 is free.
fn bandit() -> (GaussianMixtureOracle, EpisodeConfig, Vec<Instance>) {
    let spec = SyntheticTaskSpec::new(vec![vec![0.0, 0.0]], vec![DMatrix::identity(2, 2)], vec![1.0], 0).unwrap();
    let oracle = GaussianMixtureOracle::from_spec(&spec, 16);
    let mut cfg = EpisodeConfig::new(2, 1, TaskKind::Classification);
    cfg.costs = vec![1.0, 0.0];
    cfg.alpha = 1.0;
    let data = spec.sample(64, &mut stream(0, "bandit", 0));
    (oracle, cfg, data.rows().to_vec())
}

#[test]
fn surrogate_gradient_points_toward_advantaged_action() {
    let g = grouping(2, 2);
    let (oracle, _, _) = bandit();
    let state = PartialState::empty(2);
    let mut rng = stream(7, "test", 0);
    let aux = oracle.query(state.values(), state.mask(), &mut rng).unwrap();
    let net = PolicyNetwork::new(g.clone(), 1, &[8], &mut rng);
    let logits = net.logits(&policy_features(&state, &aux));
    let action = g.encode(1).unwrap();
    let decisive = action.0;
    let old = ActionDistribution::new(&logits, &g, state.mask()).unwrap().log_prob(action.0, action.1);
    let adv = 1.0;
    let surrogate = |l: &[f64]| {
        let lp = ActionDistribution::new(l, &g, state.mask()).unwrap().log_prob(action.0, action.1);
        clipped_surrogate((lp - old).exp(), adv, 0.2)
    };
    let dist = ActionDistribution::new(&logits, &g, state.mask()).unwrap();
    let mut grad = vec![0.0; logits.len()];
    dist.logit_gradient(action, adv, 0.0, &mut grad);
    assert!(grad[decisive] > 0.0);
    let h = 1e-6;
    let mut up = logits.clone();
    up[decisive] += h;
    let mut dn = logits.clone();
    dn[decisive] -= h;
    let fd = (surrogate(&up) - surrogate(&dn)) / (2.0 * h);
    assert!(((fd - grad[decisive]) / grad[decisive]).abs() < 1e-4, "fd {fd} analytic {}", grad[decisive]);
}

#[test]
fn bandit_learns_the_free_feature() {
    let (oracle, cfg, data) = bandit();
    let ctx = EpisodeContext::new(&oracle, &cfg);
    let g = grouping(2, 2);
    let tc = TrainConfig { updates: 200, episodes_per_batch: 32, seed: 3, ..Default::default() };
    let net = PolicyNetwork::new(g.clone(), 1, &tc.hidden, &mut stream(3, "init", 0));
    let mut trainer = AgentTrainer::new(net, tc).unwrap();
    trainer.train(&ctx, &data, None).unwrap();
    let net = trainer.net();
    let state = PartialState::empty(2);
    let aux = oracle.query(state.values(), state.mask(), &mut stream(3, "q", 0)).unwrap();
    let dist = net.distribution(&policy_features(&state, &aux), state.mask()).unwrap();
    let (k, n) = g.encode(1).unwrap();
    let p = dist.log_prob(k, n).exp();
    assert!(p > 0.95, "p(select feature 1) = {p}");
}

fn small_task() -> (GaussianMixtureOracle, Vec<Instance>) {
    let means = vec![vec![1.0, -1.0, 0.0, 0.5, 0.0], vec![-1.0, 1.0, 0.0, -0.5, 0.0]];
    let spec = SyntheticTaskSpec::new(means, vec![DMatrix::identity(5, 5)], vec![0.5, 0.5], 2).unwrap();
    let data = spec.sample(40, &mut stream(2, "data", 0));
    (GaussianMixtureOracle::from_spec(&spec, 32), data.rows().to_vec())
}

#[test]
fn rollouts_have_budget_length_and_telescoping_rewards() {
    let (oracle, data) = small_task();
    let mut cfg = EpisodeConfig::new(5, 3, TaskKind::Classification);
    cfg.alpha = 0.0;
    let ctx = EpisodeContext::new(&oracle, &cfg);
    let net = PolicyNetwork::new(grouping(5, 2), 2, &[16], &mut stream(8, "init", 0));
    let refs: Vec<&Instance> = data.iter().collect();
    let trajectories = collect_rollouts(&net, &ctx, &refs, ActMode::Stochastic, &mut stream(8, "roll", 0)).unwrap();
    for (t, inst) in trajectories.iter().zip(&data) {
        assert_eq!(t.steps.len(), 3);
        let sum_rm: f64 = t.steps.iter().map(|s| s.reward).sum();
        assert!((t.episode_return - (sum_rm + t.terminal_reward)).abs() < 1e-12);
        let last = &t.steps[2];
        let final_mask = last.state.mask().with(last.feature).unwrap();
        let h0 = math::entropy(&oracle.posterior(&[0.0; 5], &ObservationMask::empty(5)).unwrap());
        let hf = math::entropy(&oracle.posterior(&final_mask.apply(&inst.x), &final_mask).unwrap());
        assert!((sum_rm - (h0 - hf)).abs() < 1e-9);
        assert!(t.steps.iter().all(|s| s.reward.is_finite()));
    }
    let again = collect_rollouts(&net, &ctx, &refs, ActMode::Stochastic, &mut stream(8, "roll", 0)).unwrap();
    assert_eq!(trajectories, again);
}

#[test]
fn zero_advantages_leave_the_actor_unchanged() {
    let (oracle, data) = small_task();
    let cfg = EpisodeConfig::new(5, 1, TaskKind::Classification);
    let ctx = EpisodeContext::new(&oracle, &cfg);
    let net = PolicyNetwork::new(grouping(5, 2), 2, &[16], &mut stream(9, "init", 0));
    let refs: Vec<&Instance> = data.iter().collect();
    let mut trajectories = collect_rollouts(&net, &ctx, &refs, ActMode::Stochastic, &mut stream(9, "roll", 0)).unwrap();
    for t in &mut trajectories {
        t.steps[0].reward = 0.0;
        t.steps[0].value = 0.25;
        t.terminal_reward = 0.5;
    }
    let tc = TrainConfig { entropy_coef: 0.0, ..Default::default() };
    let before = net.actor().params().to_vec();
    let mut trainer = AgentTrainer::new(net, tc).unwrap();
    let stats = trainer.update(&trajectories, &mut stream(9, "mb", 0)).unwrap();
    assert!(stats.approx_kl.abs() < 1e-12);
    for (a, b) in before.iter().zip(trainer.net().actor().params()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn advantages_follow_the_recursion() {
    let state = PartialState::empty(2);
    let step = |value: f64, reward: f64| TrajectoryStep {
        state: state.clone(),
        features: vec![],
        action: (0, 0),
        feature: 0,
        log_prob: 0.0,
        value,
        reward,
    };
    let t = Trajectory {
        steps: vec![step(0.5, 0.1), step(0.2, -0.2)],
        terminal_reward: 1.0,
        episode_return: 0.9,
        correct: None,
    };
    let (g, l) = (0.9, 0.8);
    let (adv, ret) = t.advantages(g, l);
    let d1 = 0.8 - 0.2;
    let d0 = 0.1 + g * 0.2 - 0.5;
    assert!((adv[1] - d1).abs() < 1e-12);
    assert!((adv[0] - (d0 + g * l * d1)).abs() < 1e-12);
    assert!((ret[0] - (adv[0] + 0.5)).abs() < 1e-12);
}

#[test]
fn non_finite_loss_dumps_the_batch() {
    let (oracle, data) = small_task();
    let cfg = EpisodeConfig::new(5, 1, TaskKind::Classification);
    let ctx = EpisodeContext::new(&oracle, &cfg);
    let net = PolicyNetwork::new(grouping(5, 2), 2, &[8], &mut stream(10, "init", 0));
    let refs: Vec<&Instance> = data.iter().take(4).collect();
    let mut trajectories = collect_rollouts(&net, &ctx, &refs, ActMode::Stochastic, &mut stream(10, "roll", 0)).unwrap();
    trajectories[0].terminal_reward = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig { dump_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let mut trainer = AgentTrainer::new(net, tc).unwrap();
    match trainer.update(&trajectories, &mut stream(10, "mb", 0)) {
        Err(AgentError::NonFiniteLoss { dump: Some(path), .. }) => {
            let body = std::fs::read_to_string(path).unwrap();
            assert!(body.starts_with('['));
        }
        other => panic!("expected a dumped failure, got {other:?}"),
    }
}

#[test]
fn config_validation_rejects_bad_values() {
    let bad = [
        TrainConfig { gamma: 0.0, ..Default::default() },
        TrainConfig { lambda: 1.5, ..Default::default() },
        TrainConfig { clip: 0.0, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn predict_final_delegates_to_the_oracle() {
    let (oracle, data) = small_task();
    let inst = &data[0];
    let full = PartialState::observe(&inst.x, ObservationMask::full(5));
    let p = predict_final(&oracle, &full, TaskKind::Classification).unwrap();
    assert_eq!(p, oracle.predict(&inst.x, &ObservationMask::full(5), TaskKind::Classification).unwrap());
    assert_eq!(p, predict_final(&oracle, &full, TaskKind::Classification).unwrap());
    // equal covariances and priors: Bayes picks the nearer mean
    let d = |c: f64| -> f64 {
        let m = [c, -c, 0.0, 0.5 * c, 0.0];
        inst.x.iter().zip(m).map(|(x, m)| (x - m).powi(2)).sum()
    };
    let bayes = if d(1.0) <= d(-1.0) { 0 } else { 1 };
    match p {
        rafa_core::data_env::Prediction::Class { label, .. } => assert_eq!(label, bayes),
        _ => panic!("expected a class"),
    }
}

#[test]
fn checkpoint_round_trip() {
    let net = PolicyNetwork::new(grouping(9, 3), 4, &[16, 16], &mut stream(11, "init", 0));
    let text = net.to_checkpoint().to_text();
    let back = PolicyNetwork::from_checkpoint(&rafa_core::checkpoint::Checkpoint::from_text(&text).unwrap()).unwrap();
    assert_eq!(net, back);
}
