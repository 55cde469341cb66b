//! Rollout collection, GAE and the clipped-surrogate PPO update.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Observation};
use crate::error::{Error, Result};
use crate::nn::{log_prob_grad, GradVector, HeadObjective, HeadOutputs, PolicyValueParams};
use crate::rng::{self, Rng};

/// One transition plus the quantities computed at collection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub record_id: usize,
    pub obs: Observation,
    pub next_obs: Observation,
    /// Tabular state index of `obs`, when the environment has one.
    pub state: Option<usize>,
    pub action: usize,
    pub reward: f64,
    pub log_prob_old: f64,
    pub value_old: f64,
    pub advantage: f64,
    pub return_target: f64,
    pub done: bool,
    pub truncated: bool,
    pub episode_id: usize,
    pub step_in_episode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub records: Vec<RolloutRecord>,
    pub round: u64,
    /// Identifies the parameters that collected this buffer.
    pub collecting_params_ref: String,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy keeping only records for which `keep(record)` holds, in order.
    pub fn retain_copy(&self, mut keep: impl FnMut(&RolloutRecord) -> bool) -> RolloutBuffer {
        RolloutBuffer {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            round: self.round,
            collecting_params_ref: self.collecting_params_ref.clone(),
        }
    }

    /// Copy without the records whose ids are flagged in `removed`
    /// (indexed by record id).
    pub fn without(&self, removed: &[bool]) -> RolloutBuffer {
        self.retain_copy(|r| !removed.get(r.record_id).copied().unwrap_or(false))
    }

    pub fn max_record_id(&self) -> usize {
        self.records.iter().map(|r| r.record_id).max().unwrap_or(0)
    }
}

pub fn params_ref(params: &PolicyValueParams) -> String {
    format!("round{}-step{}", params.round, params.step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub n_steps: usize,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub lr: f64,
    pub clip_range: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub total_rounds: usize,
    pub seed: u64,
    /// Per-minibatch advantage standardization.
    pub normalize_advantage: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            n_steps: 2048,
            batch_size: 64,
            n_epochs: 10,
            lr: 5e-3,
            clip_range: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            total_rounds: 50,
            seed: 0,
            normalize_advantage: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_steps == 0 || self.batch_size == 0 || self.n_epochs == 0 {
            return bad("n_steps, batch_size and n_epochs must be positive");
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return bad("clip_range must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.lr < 0.0 || self.max_grad_norm <= 0.0 {
            return bad("lr must be nonnegative and max_grad_norm positive");
        }
        Ok(())
    }
}

/// GAE recursion. `dones[t]` cuts the bootstrap after step `t`;
/// `bootstrap_value` is used after the final step when it is not done.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for len in [values.len(), dones.len()] {
        if len != n {
            return Err(Error::ShapeMismatch { expected: n, got: len });
        }
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Inverse-CDF draw from a categorical distribution given log-probabilities.
pub fn sample_action(log_probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (a, lp) in log_probs.iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return a;
        }
    }
    log_probs.len() - 1
}

/// Collect exactly `config.n_steps` records under `params`.
///
/// The environment is reset at the start of collection and after every
/// episode end. A step-limit truncation bootstraps with `γ·V(s')`, and so
/// does a partial episode at the end of the buffer.
pub fn collect_rollout(
    env: &mut dyn Environment,
    params: &PolicyValueParams,
    config: &PpoConfig,
    rng: &mut Rng,
) -> Result<RolloutBuffer> {
    let n = config.n_steps;
    let mut records = Vec::with_capacity(n);
    let mut obs = env.reset(rng.gen());
    let mut episode_id = 0;
    let mut step_in_episode = 0;
    for record_id in 0..n {
        let state = env.state_index();
        let log_probs = params.log_probs(&obs)?;
        let value_old = params.value_forward(&obs)?;
        let action = sample_action(&log_probs, rng);
        let step = env.step(action)?;
        records.push(RolloutRecord {
            record_id,
            obs: obs.clone(),
            next_obs: step.next_obs.clone(),
            state,
            action,
            reward: step.reward,
            log_prob_old: log_probs[action],
            value_old,
            advantage: 0.0,
            return_target: 0.0,
            done: step.done,
            truncated: step.truncated,
            episode_id,
            step_in_episode,
        });
        if step.done || step.truncated {
            episode_id += 1;
            step_in_episode = 0;
            obs = env.reset(rng.gen());
        } else {
            step_in_episode += 1;
            obs = step.next_obs;
        }
    }

    let mut rewards = Vec::with_capacity(n);
    for r in &records {
        let mut reward = r.reward;
        if r.truncated {
            reward += config.gamma * params.value_forward(&r.next_obs)?;
        }
        rewards.push(reward);
    }
    let values: Vec<f64> = records.iter().map(|r| r.value_old).collect();
    let dones: Vec<bool> = records.iter().map(|r| r.done || r.truncated).collect();
    let bootstrap = match records.last() {
        Some(last) if !(last.done || last.truncated) => params.value_forward(&last.next_obs)?,
        _ => 0.0,
    };
    let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, config.gamma, config.gae_lambda)?;
    for ((r, a), g) in records.iter_mut().zip(adv).zip(ret) {
        r.advantage = a;
        r.return_target = g;
    }
    Ok(RolloutBuffer {
        records,
        round: params.round,
        collecting_params_ref: params_ref(params),
    })
}

/// Coefficients of the per-record objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveCoefs {
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
}

impl From<&PpoConfig> for ObjectiveCoefs {
    fn from(c: &PpoConfig) -> Self {
        ObjectiveCoefs {
            clip_range: c.clip_range,
            vf_coef: c.vf_coef,
            ent_coef: c.ent_coef,
        }
    }
}

/// Clipped surrogate `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)` and its
/// derivative w.r.t. `log π(a|s)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        let slope = if clipped_ratio == ratio { unclipped } else { 0.0 };
        (clipped, slope)
    }
}

/// Policy-head part of the per-record objective, `surrogate + ent_coef·H(π)`,
/// and its gradient w.r.t. the logits.
pub fn record_policy_objective(log_probs: &[f64], record: &RolloutRecord, advantage: f64, coefs: ObjectiveCoefs) -> (f64, Vec<f64>) {
    let lp = log_probs[record.action];
    let ratio = (lp - record.log_prob_old).exp();
    let (mut value, d_lp) = clipped_surrogate(ratio, advantage, coefs.clip_range);
    let mut d_logits: Vec<f64> = log_prob_grad(log_probs, record.action)
        .into_iter()
        .map(|g| g * d_lp)
        .collect();
    if coefs.ent_coef != 0.0 {
        let entropy: f64 = -log_probs.iter().map(|l| l.exp() * l).sum::<f64>();
        value += coefs.ent_coef * entropy;
        for (d, l) in d_logits.iter_mut().zip(log_probs) {
            *d -= coefs.ent_coef * l.exp() * (l + entropy);
        }
    }
    (value, d_logits)
}

/// Per-record PPO objective (to be ascended) as a function of the heads:
/// `surrogate − vf_coef·(V − R)² + ent_coef·H(π)`.
pub fn record_head_objective(heads: &HeadOutputs, record: &RolloutRecord, advantage: f64, coefs: ObjectiveCoefs) -> HeadObjective {
    let (policy_value, d_logits) = record_policy_objective(&heads.log_probs, record, advantage, coefs);
    let err = heads.value - record.return_target;
    HeadObjective {
        value: policy_value - coefs.vf_coef * err * err,
        d_logits,
        d_value: -2.0 * coefs.vf_coef * err,
    }
}

pub fn ppo_record_objective(params: &PolicyValueParams, record: &RolloutRecord, coefs: ObjectiveCoefs) -> Result<f64> {
    let (v, _) = record_grad(params, record, coefs)?;
    Ok(v)
}

/// Ascent gradient of the per-record objective, with the record's stored
/// advantage.
pub fn record_grad(params: &PolicyValueParams, record: &RolloutRecord, coefs: ObjectiveCoefs) -> Result<(f64, GradVector)> {
    let (v, g) = params.per_sample_grad(&record.obs, |h| record_head_objective(h, record, record.advantage, coefs))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective of record {}", record.record_id)));
    }
    Ok((v, g))
}

/// How each epoch's minibatches are formed.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Shuffle the buffer and slice it; the last minibatch may be short.
    Shuffle,
    /// Draw `len` record positions i.i.d. from these weights (aligned with
    /// buffer order), then slice.
    Weighted(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOptions {
    pub sampling: Sampling,
    /// Keep θ_j for every optimization step (needed for full TracIn).
    pub keep_checkpoints: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            sampling: Sampling::Shuffle,
            keep_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub members: Vec<usize>,
    pub checkpoint: Option<PolicyValueParams>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTrace {
    pub steps: Vec<TraceStep>,
}

impl StepTrace {
    /// How many minibatches each record id appeared in.
    pub fn membership_counts(&self, n_ids: usize) -> Vec<usize> {
        let mut counts = vec![0; n_ids];
        for s in &self.steps {
            for &id in &s.members {
                counts[id] += 1;
            }
        }
        counts
    }
}

fn minibatch_advantages(batch: &[&RolloutRecord], normalize: bool) -> Vec<f64> {
    let adv: Vec<f64> = batch.iter().map(|r| r.advantage).collect();
    if !normalize || adv.len() < 2 {
        return adv;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Multi-epoch minibatch SGD on the buffer. Returns θ^(k+1) (round + 1,
/// step 0) and the per-step minibatch membership.
pub fn ppo_update(
    params: &PolicyValueParams,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    rng: &mut Rng,
    options: &UpdateOptions,
) -> Result<(PolicyValueParams, StepTrace)> {
    if buffer.is_empty() {
        return Err(Error::NoRecords);
    }
    let n = buffer.len();
    if let Sampling::Weighted(w) = &options.sampling {
        if w.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: w.len() });
        }
    }
    let coefs = ObjectiveCoefs::from(config);
    let mut current = params.clone();
    current.step = 0;
    let mut trace = StepTrace::default();
    let mut order: Vec<usize>;
    for _epoch in 0..config.n_epochs {
        match &options.sampling {
            Sampling::Shuffle => {
                order = (0..n).collect();
                order.shuffle(rng);
            }
            Sampling::Weighted(w) => {
                let dist = rand::distributions::WeightedIndex::new(w)
                    .map_err(|e| Error::DegenerateInput(format!("sampling weights: {e}")))?;
                order = (0..n).map(|_| rng.sample(&dist)).collect();
            }
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&RolloutRecord> = chunk.iter().map(|&i| &buffer.records[i]).collect();
            let adv = minibatch_advantages(&batch, config.normalize_advantage);
            let mut loss_grad = GradVector::zeros(&current.arch);
            let scale = -1.0 / batch.len() as f64;
            for (r, &a) in batch.iter().zip(&adv) {
                current.accumulate_grad(&r.obs, |h| record_head_objective(h, r, a, coefs), scale, &mut loss_grad)?;
            }
            loss_grad.check_finite(&format!(
                "minibatch gradient at round {} step {}",
                current.round, current.step
            ))?;
            trace.steps.push(TraceStep {
                members: batch.iter().map(|r| r.record_id).collect(),
                checkpoint: options.keep_checkpoints.then(|| current.clone()),
            });
            current = current.sgd_step(&loss_grad, config.lr, config.max_grad_norm);
        }
    }
    current.round = params.round + 1;
    current.step = 0;
    Ok((current, trace))
}

/// Mean undiscounted return of `episodes` episodes with sampled actions.
/// Episodes run in parallel on independent streams derived from one draw
/// of `rng`; the sum is taken in episode order.
pub fn evaluate(params: &PolicyValueParams, env: &dyn Environment, episodes: usize, rng: &mut Rng) -> Result<f64> {
    let episodes = episodes.max(1);
    let base: u64 = rng.gen();
    // Tabular environments: one forward pass per state.
    let table: Option<Vec<Vec<f64>>> = match env.as_tabular() {
        Some(t) => Some(
            (0..t.n_states())
                .map(|s| params.log_probs(&t.observation(s)))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut erng = rng::stream(base, "episode", e as u64);
            let mut env = env.box_clone();
            let mut obs = env.reset(erng.gen());
            let mut total = 0.0;
            loop {
                let lp = match (&table, env.state_index()) {
                    (Some(t), Some(s)) => t[s].clone(),
                    _ => params.log_probs(&obs)?,
                };
                let step = env.step(sample_action(&lp, &mut erng))?;
                total += step.reward;
                if step.done || step.truncated {
                    return Ok(total);
                }
                obs = step.next_obs;
            }
        })
        .collect::<Result<_>>()?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}
