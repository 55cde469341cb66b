mod common;

use proptest::prelude::*;
use rand::Rng as _;

use common::*;
use rlattr::attribution::{influence_single_checkpoint, DotMethod, TargetFunction};
use rlattr::diagnostics::{
    knn_graph, mc_advantage, policy_evaluation, roughness, spearman, SimilarityGraph,
};
use rlattr::env::{ChainMdp, FrozenLake};
use rlattr::metrics::{first_round_reaching, rt_peak, se_metrics, RoundRow, RunLog};
use rlattr::ppo::{
    clipped_surrogate, collect_rollout, compute_gae, ppo_update, ObjectiveCoefs, PpoConfig, UpdateOptions,
};
use rlattr::rng::stream;
use rlattr::{Arch, EnvId, Environment, Observation, PolicyValueParams};

fn coefs() -> ObjectiveCoefs {
    ObjectiveCoefs {
        clip_range: 0.2,
        vf_coef: 0.5,
        ent_coef: 0.0,
    }
}

#[test]
fn gae_worked_example() {
    // Rewards (0, 0, 1), values (.1, .2, .3), episode ends at the last step.
    let (gamma, lambda) = (0.99, 0.95);
    let (adv, ret) = compute_gae(&[0.0, 0.0, 1.0], &[0.1, 0.2, 0.3], &[false, false, true], 0.0, gamma, lambda).unwrap();
    let d2 = 1.0 - 0.3;
    let d1 = 0.0 + gamma * 0.3 - 0.2;
    let d0 = 0.0 + gamma * 0.2 - 0.1;
    let a1 = d1 + gamma * lambda * d2;
    let a0 = d0 + gamma * lambda * a1;
    for (x, y) in adv.iter().zip([a0, a1, d2]) {
        assert!((x - y).abs() < 1e-15);
    }
    for (r, (a, v)) in ret.iter().zip(adv.iter().zip([0.1, 0.2, 0.3])) {
        assert!((r - (a + v)).abs() < 1e-15);
    }
}

#[test]
fn chain_right_policy_undiscounted_return_is_terminal_reward() {
    for len in 1..8 {
        let mut env = ChainMdp::new(len);
        env.reset(0);
        let mut total = 0.0;
        loop {
            let s = env.step(ChainMdp::RIGHT).unwrap();
            total += s.reward;
            if s.done {
                break;
            }
        }
        assert_eq!(total, 1.0);
    }
}

#[test]
fn mc_table_equals_dp_on_deterministic_policies() {
    let mut rng = stream(3, "test", 0);
    let mut checked = 0;
    while checked < 20 {
        let mdp = FrozenLake::new();
        let policy: Vec<usize> = (0..16).map(|_| rng.gen_range(0..4)).collect();
        if !terminates(&mdp, &policy) {
            continue;
        }
        checked += 1;
        let params = tabular_policy_params(&mdp, &policy);
        let config = PpoConfig {
            n_steps: 200,
            ..PpoConfig::default()
        };
        let mut env = FrozenLake::new();
        let buffer = collect_rollout(&mut env, &params, &config, &mut stream(3, "collect", checked)).unwrap();
        let table = mc_advantage(&env, &buffer, 0.99, 1).unwrap();
        let v = deterministic_values(&mdp, &policy, 0.99);
        for s in 0..16 {
            if let Some(vb) = table.v_bar[s] {
                assert!((vb - v[s]).abs() < 1e-9, "state {s}: {vb} vs {}", v[s]);
                assert!(table.advantage(s, policy[s]).unwrap().abs() < 1e-9);
            }
        }
        let onehot: Vec<Vec<f64>> = policy.iter().map(|&a| (0..4).map(|b| f64::from(u8::from(a == b))).collect()).collect();
        let (vdp, _) = policy_evaluation(&mdp, &onehot, 0.99).unwrap();
        for s in 0..16 {
            assert!((vdp[s] - v[s]).abs() < 1e-9);
        }
    }
}

fn log_with(returns: &[f64], ms: &[f64]) -> RunLog {
    let mut log = RunLog::new("t", 0);
    for (i, (&r, &t)) in returns.iter().zip(ms).enumerate() {
        log.rows.push(RoundRow {
            round: i + 1,
            test_return: r,
            n_filtered: 0,
            wall_ms_collect: t,
            wall_ms_influence: 0.0,
            wall_ms_optimize: 0.0,
        });
    }
    log
}

fn small_arch() -> impl Strategy<Value = Arch> {
    (1usize..6, 2usize..5, prop::collection::vec(1usize..6, 0..3), any::<bool>()).prop_map(|(obs, act, hidden, tanh)| Arch {
        obs_dim: obs,
        n_actions: act,
        hidden,
        activation: if tanh { rlattr::nn::Activation::Tanh } else { rlattr::nn::Activation::Identity },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gae_matches_direct_sum(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, prop::bool::weighted(0.2)), 1..40),
        bootstrap in -2.0f64..2.0,
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, _) = compute_gae(&r, &v, &d, bootstrap, gamma, lambda).unwrap();
        for (a, b) in adv.iter().zip(gae_direct(&r, &v, &d, bootstrap, gamma, lambda)) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn surrogate_clip_bound(ratio in 0.01f64..5.0, adv in -5.0f64..5.0, eps in 0.01f64..0.9) {
        let (value, slope) = clipped_surrogate(ratio, adv, eps);
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        prop_assert!(value <= (ratio * adv).max(clipped));
        prop_assert_eq!(value, (ratio * adv).min(clipped));
        if (ratio - 1.0).abs() <= eps {
            prop_assert_eq!(value, ratio * adv);
            prop_assert_eq!(slope, ratio * adv);
        }
    }

    #[test]
    fn gradients_match_finite_differences(arch in small_arch(), seed in any::<u64>()) {
        let mut rng = stream(seed, "prop", 0);
        let p = random_params(&arch, &mut rng, 0.5);
        let obs = random_obs(&mut rng, arch.obs_dim);
        let obj = HeadPoly::random(arch.n_actions, &mut rng);
        let (_, g) = p.per_sample_grad(&obs, |h| obj.head(h)).unwrap();
        for i in 0..arch.n_params() {
            let fd = central_difference(&p, i, 1e-6, &|q| obj.eval(q, &obs));
            prop_assert!(rel_err(g.values[i], fd) < 1e-5, "coord {}: {} vs {}", i, g.values[i], fd);
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalized(arch in small_arch(), seed in any::<u64>()) {
        let mut rng = stream(seed, "prop", 1);
        let p = random_params(&arch, &mut rng, 1.0);
        let obs = Observation(gaussian_vec(&mut rng, arch.obs_dim, 3.0));
        let a = p.log_probs(&obs).unwrap();
        prop_assert_eq!(&a, &p.clone().log_probs(&obs).unwrap());
        prop_assert!((a.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_and_value_segments_are_disjoint(arch in small_arch(), seed in any::<u64>()) {
        let mut rng = stream(seed, "prop", 2);
        let p = random_params(&arch, &mut rng, 0.5);
        let obs = random_obs(&mut rng, arch.obs_dim);
        let mut policy_only = HeadPoly::random(arch.n_actions, &mut rng);
        policy_only.c_v = 0.0;
        policy_only.c_q = 0.0;
        let (_, g) = p.per_sample_grad(&obs, |h| policy_only.head(h)).unwrap();
        prop_assert!(g.values[g.value_segment()].iter().all(|&x| x == 0.0));
        let value_only = HeadPoly { c_logp: vec![0.0; arch.n_actions], c_v: 1.0, c_q: 0.3 };
        let (_, g) = p.per_sample_grad(&obs, |h| value_only.head(h)).unwrap();
        prop_assert!(g.values[g.policy_segment()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn update_leaves_buffer_and_covers_each_record_per_epoch(seed in 0u64..1000, batches in 1usize..5, epochs in 1usize..4) {
        let env_id = EnvId::Chain(4);
        let mut env = env_id.make();
        let p = PolicyValueParams::init(Arch::standard(env.obs_dim(), env.n_actions()), &mut stream(seed, "init", 0));
        let config = PpoConfig { n_steps: 8 * batches, batch_size: 8, n_epochs: epochs, ..PpoConfig::default() };
        let buffer = collect_rollout(env.as_mut(), &p, &config, &mut stream(seed, "collect", 0)).unwrap();
        let before = buffer.clone();
        let (_, trace) = ppo_update(&p, &buffer, &config, &mut stream(seed, "shuffle", 0), &UpdateOptions::default()).unwrap();
        prop_assert_eq!(&buffer, &before);
        prop_assert_eq!(trace.steps.len(), batches * epochs);
        prop_assert!(trace.membership_counts(buffer.len()).iter().all(|&c| c == epochs));
    }

    #[test]
    fn influence_is_linear_in_the_validation_set(seed in any::<u64>(), n1 in 1usize..6, n2 in 1usize..6) {
        let arch = Arch::standard(4, 3);
        let mut rng = stream(seed, "prop", 3);
        let p = random_params(&arch, &mut rng, 0.3);
        let train = buffer_of((0..6).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let v1 = buffer_of((0..n1).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let v2 = buffer_of((0..n2).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let both = buffer_of(v1.records.iter().chain(&v2.records).cloned().collect());
        let score = |v: &rlattr::RolloutBuffer| {
            influence_single_checkpoint(&p, &train, TargetFunction::Return { validation: v }, coefs(), DotMethod::Ghost).unwrap().scores
        };
        let (s1, s2, s12) = (score(&v1), score(&v2), score(&both));
        let (w1, w2) = (n1 as f64 / (n1 + n2) as f64, n2 as f64 / (n1 + n2) as f64);
        for i in 0..train.len() {
            let expect = w1 * s1[i] + w2 * s2[i];
            prop_assert!((s12[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn scaling_the_target_keeps_the_ranking(seed in any::<u64>(), k in -20i32..20) {
        let arch = Arch::standard(5, 2);
        let mut rng = stream(seed, "prop", 4);
        let p = random_params(&arch, &mut rng, 0.3);
        let train = buffer_of((0..12).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let obs = random_obs(&mut rng, 5);
        let base = influence_single_checkpoint(&p, &train, TargetFunction::Action { obs: &obs, action: 1 }, coefs(), DotMethod::Ghost).unwrap().scores;
        // Scaling the validation advantages by a power of two scales the
        // target gradient exactly.
        let mut val = buffer_of((0..5).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let s1 = influence_single_checkpoint(&p, &train, TargetFunction::Return { validation: &val }, coefs(), DotMethod::Ghost).unwrap().scores;
        let c = 2f64.powi(k);
        val.records.iter_mut().for_each(|r| r.advantage *= c);
        let s2 = influence_single_checkpoint(&p, &train, TargetFunction::Return { validation: &val }, coefs(), DotMethod::Ghost).unwrap().scores;
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
            idx
        };
        prop_assert_eq!(order(&s1), order(&s2));
        for (a, b) in s1.iter().zip(&s2) {
            prop_assert_eq!(a * c, *b);
        }
        prop_assert_eq!(base.len(), train.len());
    }

    #[test]
    fn value_loss_never_affects_scores(seed in any::<u64>(), vf in 0.0f64..5.0, shift in -3.0f64..3.0) {
        let arch = Arch::standard(3, 3);
        let mut rng = stream(seed, "prop", 5);
        let p = random_params(&arch, &mut rng, 0.3);
        let train = buffer_of((0..8).map(|i| random_record(&arch, &p, i, &mut rng)).collect());
        let mut moved = train.clone();
        moved.records.iter_mut().for_each(|r| r.return_target += shift);
        let other = ObjectiveCoefs { vf_coef: vf, ..coefs() };
        for method in [DotMethod::Ghost, DotMethod::Naive] {
            let a = influence_single_checkpoint(&p, &train, TargetFunction::Return { validation: &train }, coefs(), method).unwrap();
            let b = influence_single_checkpoint(&p, &moved, TargetFunction::Return { validation: &train }, other, method).unwrap();
            prop_assert_eq!(&a.scores, &b.scores);
        }
    }

    #[test]
    fn roughness_matches_dense_oracle(seed in any::<u64>(), n in 2usize..30, u in 1usize..35, dim in 1usize..5) {
        let mut rng = stream(seed, "prop", 6);
        let emb: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let g = knn_graph((0..n).collect(), &values, emb.clone(), u).unwrap();
        let r = roughness(&g).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r - dense_roughness(&values, &emb, u)).abs() < 1e-12);
        prop_assert!(g.edges.iter().all(|e| e.2 > 0.0 && e.2 <= 1.0));
        let max = g.node_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn roughness_zero_iff_constant_on_components(seed in any::<u64>(), split in any::<bool>()) {
        // Two far-apart clusters joined by no edge when u is small.
        let mut rng = stream(seed, "prop", 7);
        let mut emb = Vec::new();
        for c in 0..2 {
            for _ in 0..5 {
                emb.push(vec![100.0 * c as f64 + rng.gen_range(0.0..1.0)]);
            }
        }
        let values: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else if split { 1.0 } else { 0.5 }).collect();
        let g = knn_graph((0..10).collect(), &values, emb.clone(), 2).unwrap();
        prop_assert_eq!(roughness(&g).unwrap(), 0.0);
        let mut bumped = values.clone();
        bumped[7] = 0.9;
        let g = knn_graph((0..10).collect(), &bumped, emb, 2).unwrap();
        prop_assert!(roughness(&g).unwrap() > 0.0);
    }

    #[test]
    fn spearman_invariant_under_monotone_maps(xs in prop::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
        let mut rng = stream(seed, "prop", 8);
        let ys: Vec<f64> = xs.iter().map(|x| x + rng.gen_range(-5.0..5.0)).collect();
        if let Ok(rho) = spearman(&xs, &ys) {
            let fx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let gy: Vec<f64> = ys.iter().map(|y| (y / 4.0).exp()).collect();
            prop_assert!((spearman(&fx, &gy).unwrap() - rho).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }

    #[test]
    fn se_metrics_are_affine_invariant(
        a in prop::collection::vec(0i32..64, 1..30),
        b in prop::collection::vec(0i32..64, 1..30),
        k in -3i32..4,
        shift in -320i32..320,
    ) {
        // Grid values, power-of-two scale and grid shift keep the map exact,
        // so only the order of returns can matter.
        let map = |x: &[i32], scale: f64, shift: f64| x.iter().map(|&v| f64::from(v) / 64.0 * scale + shift).collect::<Vec<_>>();
        let plain = se_metrics(&RunLog::from_returns("s", &map(&a, 1.0, 0.0)), &RunLog::from_returns("i", &map(&b, 1.0, 0.0))).unwrap();
        let (c, d) = (2f64.powi(k), f64::from(shift) / 64.0);
        let moved = se_metrics(&RunLog::from_returns("s", &map(&a, c, d)), &RunLog::from_returns("i", &map(&b, c, d))).unwrap();
        prop_assert_eq!(plain, moved);
    }

    #[test]
    fn first_round_reaching_is_monotone(r in prop::collection::vec(0.0f64..1.0, 1..30), v1 in 0.0f64..1.2, v2 in 0.0f64..1.2) {
        let log = RunLog::from_returns("s", &r);
        let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        let inf = |o: Option<usize>| o.unwrap_or(usize::MAX);
        prop_assert!(inf(first_round_reaching(&log, lo)) <= inf(first_round_reaching(&log, hi)));
    }

    #[test]
    fn rt_peak_is_at_most_one_hundred(
        a in prop::collection::vec((0.0f64..1.0, 0.1f64..10.0), 1..20),
        b in prop::collection::vec((0.0f64..1.0, 0.0f64..10.0), 1..20),
    ) {
        let s = log_with(&a.iter().map(|x| x.0).collect::<Vec<_>>(), &a.iter().map(|x| x.1).collect::<Vec<_>>());
        let i = log_with(&b.iter().map(|x| x.0).collect::<Vec<_>>(), &b.iter().map(|x| x.1).collect::<Vec<_>>());
        prop_assert!(rt_peak(&s, &i).unwrap() <= 100.0);
    }

    #[test]
    fn env_rollouts_are_deterministic_and_bounded(actions in prop::collection::vec(0usize..7, 1..400), which in 0usize..3) {
        let id = [EnvId::FrozenLake4x4, EnvId::EmptyGrid8x8, EnvId::Chain(5)][which];
        let run = || {
            let mut env = id.make();
            let mut obs = vec![env.reset(0)];
            let mut rewards = Vec::new();
            let mut len = 0;
            for &a in &actions {
                let s = env.step(a % env.n_actions()).unwrap();
                len += 1;
                rewards.push(s.reward);
                obs.push(s.next_obs.clone());
                if s.done || s.truncated {
                    assert!(len <= id.spec().max_steps);
                    break;
                }
            }
            (obs, rewards)
        };
        let (o1, r1) = run();
        let (o2, r2) = run();
        prop_assert_eq!(&o1, &o2);
        prop_assert_eq!(&r1, &r2);
        match id {
            EnvId::FrozenLake4x4 => {
                prop_assert!(r1.iter().all(|&r| r == 0.0 || r == 1.0));
                let total: f64 = r1.iter().sum();
                prop_assert!(total == 0.0 || total == 1.0);
            }
            _ => prop_assert!(r1.iter().all(|&r| (0.0..=1.0).contains(&r))),
        }
    }
}

#[test]
fn constant_node_values_have_zero_roughness() {
    let mut rng = stream(9, "test", 0);
    let emb: Vec<Vec<f64>> = (0..30).map(|_| gaussian_vec(&mut rng, 3, 1.0)).collect();
    let g = knn_graph((0..30).collect(), &[0.7; 30], emb, 5).unwrap();
    assert_eq!(roughness(&g).unwrap(), 0.0);
    let empty = SimilarityGraph { edges: vec![], ..g };
    assert!(roughness(&empty).is_err());
}

#[test]
fn chain_exact_values_match_walk() {
    let mdp = ChainMdp::new(6);
    let right = vec![ChainMdp::RIGHT; 6];
    let v = deterministic_values(&mdp, &right, 0.9);
    let onehot: Vec<Vec<f64>> = right.iter().map(|&a| (0..2).map(|b| f64::from(u8::from(a == b))).collect()).collect();
    let (vdp, _) = policy_evaluation(&mdp, &onehot, 0.9).unwrap();
    for s in 0..6 {
        assert!((v[s] - 0.9f64.powi(5 - s as i32)).abs() < 1e-12);
        assert!((vdp[s] - v[s]).abs() < 1e-12);
    }
}
