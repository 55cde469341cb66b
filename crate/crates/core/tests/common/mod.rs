//! Reference implementations used as oracles by the integration tests.
//! Everything here is written independently of the library code paths it
//! checks: direct sums instead of recursions, dense matrices instead of
//! edge lists, finite differences instead of backprop.

#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;

use rlattr::attribution::{target_grad, TargetFunction};
use rlattr::nn::{Activation, HeadObjective, HeadOutputs};
use rlattr::ppo::{record_grad, ObjectiveCoefs};
use rlattr::rng::Rng;
use rlattr::{Arch, Observation, PolicyValueParams, RolloutBuffer, RolloutRecord, TabularMdp};

pub fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Dense input with unit expected norm, so pre-activations stay O(1)
/// whatever the input width.
pub fn random_obs(rng: &mut Rng, dim: usize) -> Observation {
    Observation(gaussian_vec(rng, dim, 1.0 / (dim as f64).sqrt()))
}

/// Orthogonal init plus a dense perturbation so that no layer is special.
pub fn random_params(arch: &Arch, rng: &mut Rng, noise: f64) -> PolicyValueParams {
    let mut p = PolicyValueParams::init(arch.clone(), rng);
    for (t, d) in p.theta.iter_mut().zip(gaussian_vec(rng, arch.n_params(), noise)) {
        *t += d;
    }
    p
}

pub fn shapes() -> Vec<(&'static str, Arch)> {
    vec![
        ("chain 5-8-8-2 tanh", Arch { obs_dim: 5, n_actions: 2, hidden: vec![8, 8], activation: Activation::Tanh }),
        ("linear 4-3", Arch { obs_dim: 4, n_actions: 3, hidden: vec![], activation: Activation::Tanh }),
        ("6-5-3 identity", Arch { obs_dim: 6, n_actions: 3, hidden: vec![5], activation: Activation::Identity }),
        ("frozenlake 16-64-64-4", Arch::standard(16, 4)),
        ("emptygrid 147-64-64-7", Arch::standard(147, 7)),
    ]
}

/// `J = Σ_a c_a log π_a + c_v V + c_q V²`, a generic smooth objective of
/// both heads.
#[derive(Debug, Clone)]
pub struct HeadPoly {
    pub c_logp: Vec<f64>,
    pub c_v: f64,
    pub c_q: f64,
}

impl HeadPoly {
    pub fn random(n_actions: usize, rng: &mut Rng) -> Self {
        HeadPoly {
            c_logp: gaussian_vec(rng, n_actions, 1.0),
            c_v: rng.sample(StandardNormal),
            c_q: rng.sample::<f64, _>(StandardNormal) * 0.5,
        }
    }

    pub fn eval(&self, p: &PolicyValueParams, obs: &Observation) -> f64 {
        let lp = p.log_probs(obs).unwrap();
        let v = p.value_forward(obs).unwrap();
        self.c_logp.iter().zip(&lp).map(|(c, l)| c * l).sum::<f64>() + self.c_v * v + self.c_q * v * v
    }

    /// Derivatives w.r.t. the logits: ∂/∂z_k Σ c_a (z_a − lse z) = c_k − π_k Σ c_a.
    pub fn head(&self, h: &HeadOutputs) -> HeadObjective {
        let total: f64 = self.c_logp.iter().sum();
        HeadObjective {
            value: self.c_logp.iter().zip(&h.log_probs).map(|(c, l)| c * l).sum::<f64>()
                + self.c_v * h.value
                + self.c_q * h.value * h.value,
            d_logits: self.c_logp.iter().zip(&h.log_probs).map(|(c, l)| c - l.exp() * total).collect(),
            d_value: self.c_v + 2.0 * self.c_q * h.value,
        }
    }
}

/// Central difference of `f` along coordinate `i` of θ.
pub fn central_difference(p: &PolicyValueParams, i: usize, h: f64, f: &dyn Fn(&PolicyValueParams) -> f64) -> f64 {
    let mut plus = p.clone();
    plus.theta[i] += h;
    let mut minus = p.clone();
    minus.theta[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Entrywise relative error with a floor on the denominator, so entries
/// that are zero up to rounding compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Coordinates to probe: all of them for small nets, a fixed-size random
/// sample for large ones (always including the first and last entry).
pub fn probe_coords(n: usize, rng: &mut Rng, budget: usize) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    let mut c: Vec<usize> = (0..budget - 2).map(|_| rng.gen_range(0..n)).collect();
    c.push(0);
    c.push(n - 1);
    c
}

/// GAE as the explicit truncated sum Â_t = Σ_l (γλ)^l δ_{t+l}, stopping
/// after the first `done` at or after t.
pub fn gae_direct(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for u in t..n {
                sum += w * delta(u);
                if dones[u] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// Scores by materializing each record gradient and the target gradient.
pub fn naive_scores(p: &PolicyValueParams, buffer: &RolloutBuffer, target: TargetFunction<'_>, coefs: ObjectiveCoefs) -> Vec<f64> {
    let t = target_grad(p, target).unwrap();
    buffer
        .records
        .iter()
        .map(|r| {
            let (_, g) = record_grad(p, r, coefs).unwrap();
            g.values.iter().zip(&t.values).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Record with a dense random observation.
pub fn random_record(arch: &Arch, p: &PolicyValueParams, id: usize, rng: &mut Rng) -> RolloutRecord {
    let obs = random_obs(rng, arch.obs_dim);
    let action = rng.gen_range(0..arch.n_actions);
    let lp = p.log_probs(&obs).unwrap()[action];
    let v = p.value_forward(&obs).unwrap();
    RolloutRecord {
        record_id: id,
        next_obs: obs.clone(),
        obs,
        state: None,
        action,
        reward: 0.0,
        log_prob_old: lp,
        value_old: v,
        advantage: rng.sample(StandardNormal),
        return_target: rng.sample(StandardNormal),
        done: false,
        truncated: false,
        episode_id: 0,
        step_in_episode: id,
    }
}

pub fn buffer_of(records: Vec<RolloutRecord>) -> RolloutBuffer {
    RolloutBuffer {
        records,
        round: 0,
        collecting_params_ref: "test".into(),
    }
}

/// Values of a deterministic policy on a deterministic MDP, by walking the
/// trajectory from every state. A cycle without reward contributes zero,
/// so the walk stops at the first repeated state.
pub fn deterministic_values(mdp: &dyn TabularMdp, policy: &[usize], gamma: f64) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s0| {
            if mdp.is_absorbing(s0) {
                return 0.0;
            }
            let mut seen = vec![false; mdp.n_states()];
            let (mut s, mut g, mut w) = (s0, 0.0, 1.0);
            loop {
                seen[s] = true;
                let (next, r, done) = mdp.transition(s, policy[s]);
                g += w * r;
                if done || mdp.is_absorbing(next) {
                    break;
                }
                if seen[next] {
                    assert_eq!(g, 0.0, "rewarding cycle");
                    break;
                }
                w *= gamma;
                s = next;
            }
            g
        })
        .collect()
}

/// Parameters of a linear policy that picks `policy[s]` with probability
/// 1 − O(e^-60) on one-hot observations.
pub fn tabular_policy_params(mdp: &dyn TabularMdp, policy: &[usize]) -> PolicyValueParams {
    let arch = Arch {
        obs_dim: mdp.n_states(),
        n_actions: mdp.n_actions(),
        hidden: vec![],
        activation: Activation::Tanh,
    };
    let mut p = PolicyValueParams::zeros(arch);
    for (s, &a) in policy.iter().enumerate() {
        p.theta[s * mdp.n_actions() + a] = 60.0;
    }
    p
}

/// Whether the deterministic walk from the start state terminates.
pub fn terminates(mdp: &dyn TabularMdp, policy: &[usize]) -> bool {
    let mut s = mdp.start_state();
    for _ in 0..=mdp.n_states() {
        let (next, _, done) = mdp.transition(s, policy[s]);
        if done || mdp.is_absorbing(next) {
            return true;
        }
        s = next;
    }
    false
}

/// Roughness from a dense weight matrix built from scratch: Gaussian
/// weights with median-distance bandwidth, u nearest neighbours per node
/// (ties at the u-th distance included), symmetrized by "either endpoint".
pub fn dense_roughness(values: &[f64], emb: &[Vec<f64>], u: usize) -> f64 {
    let n = values.len();
    let d = |i: usize, j: usize| -> f64 { emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() };
    let mut all: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            all.push(d(i, j));
        }
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let med = if m % 2 == 1 { all[m / 2] } else { (all[m / 2 - 1] + all[m / 2]) / 2.0 };
    let sigma = if med > 0.0 { med } else { 1.0 };
    let mut keep = vec![vec![false; n]; n];
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(i, j)).collect();
        row.sort_by(f64::total_cmp);
        let cut = row[u.min(n - 1) - 1];
        for j in (0..n).filter(|&j| j != i) {
            if d(i, j) <= cut {
                keep[i][j] = true;
                keep[j][i] = true;
            }
        }
    }
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let x: Vec<f64> = values.iter().map(|v| v / scale).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if keep[i][j] {
                let w = (-d(i, j).powi(2) / (sigma * sigma)).exp();
                num += w * (x[i] - x[j]).powi(2);
                den += w;
            }
        }
    }
    num / den
}
