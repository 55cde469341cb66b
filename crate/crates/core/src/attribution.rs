//! Influence of rollout records on a target function.
//!
//! A record's influence is the inner product between the target gradient
//! and the record's per-sample training gradient (ascent direction of the
//! per-record PPO objective). Positive scores mean a step on that record
//! alone would increase the target.
//!
//! Two target functions are supported: the log-probability of one action
//! at one state, and a REINFORCE-style return surrogate
//! `mean_i Â_i · log π(a_i|s_i)` over a validation buffer collected by the
//! reference policy (in practice the round's own buffer).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{log_prob_grad, GradVector, HeadObjective, PolicyValueParams};
use crate::ppo::{record_grad, record_policy_objective, ObjectiveCoefs, RolloutBuffer, StepTrace};

#[derive(Debug, Clone, Copy)]
pub enum TargetFunction<'a> {
    Action { obs: &'a Observation, action: usize },
    Return { validation: &'a RolloutBuffer },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Action,
    Return,
}

impl TargetFunction<'_> {
    pub fn kind(&self) -> TargetKind {
        match self {
            TargetFunction::Action { .. } => TargetKind::Action,
            TargetFunction::Return { .. } => TargetKind::Return,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfluenceMode {
    #[serde(rename = "full")]
    FullTracIn,
    #[serde(rename = "fast")]
    SingleCheckpoint,
}

/// How per-record dot products are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DotMethod {
    /// Contract the target gradient against each layer's activation and
    /// back-propagated error; per-record gradients are never formed.
    Ghost,
    /// Materialize every per-record gradient and take the dot product.
    Naive,
}

/// Influence scores for one round, in buffer (record id) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub round: u64,
    pub mode: InfluenceMode,
    pub target: TargetKind,
    pub scores: Vec<f64>,
    pub target_grad_norm: f64,
}

impl InfluenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("influence report: {e}")))
    }
}

/// Gradient of the target function. The value segment is always zero.
pub fn target_grad(params: &PolicyValueParams, target: TargetFunction<'_>) -> Result<GradVector> {
    let mut grad = GradVector::zeros(&params.arch);
    match target {
        TargetFunction::Action { obs, action } => {
            params.accumulate_grad(
                obs,
                |h| HeadObjective {
                    value: h.log_probs[action],
                    d_logits: log_prob_grad(&h.log_probs, action),
                    d_value: 0.0,
                },
                1.0,
                &mut grad,
            )?;
        }
        TargetFunction::Return { validation } => {
            if validation.is_empty() {
                return Err(Error::EmptyValidation);
            }
            let n = validation.len() as f64;
            for r in &validation.records {
                if r.advantage == 0.0 {
                    continue;
                }
                params.accumulate_grad(
                    &r.obs,
                    |h| HeadObjective {
                        value: h.log_probs[r.action] * r.advantage,
                        d_logits: log_prob_grad(&h.log_probs, r.action),
                        d_value: 0.0,
                    },
                    r.advantage / n,
                    &mut grad,
                )?;
            }
        }
    }
    grad.check_finite("target gradient")?;
    Ok(grad)
}

/// Value of the target function (used by first-order fidelity checks).
pub fn target_value(params: &PolicyValueParams, target: TargetFunction<'_>) -> Result<f64> {
    match target {
        TargetFunction::Action { obs, action } => Ok(params.log_probs(obs)?[action]),
        TargetFunction::Return { validation } => {
            if validation.is_empty() {
                return Err(Error::EmptyValidation);
            }
            let mut total = 0.0;
            for r in &validation.records {
                total += r.advantage * params.log_probs(&r.obs)?[r.action];
            }
            Ok(total / validation.len() as f64)
        }
    }
}

/// Scores of the records at `indices` (positions in `buffer`) against a
/// fixed target gradient, all evaluated at `params`.
fn dot_scores(
    params: &PolicyValueParams,
    buffer: &RolloutBuffer,
    indices: &[usize],
    tgrad: &GradVector,
    coefs: ObjectiveCoefs,
    method: DotMethod,
) -> Result<Vec<f64>> {
    indices
        .par_iter()
        .map(|&i| {
            let r = &buffer.records[i];
            let s = match method {
                DotMethod::Ghost => {
                    let trace = params.policy_trace(&r.obs)?;
                    let log_probs = crate::nn::log_softmax(trace.output());
                    let (_, d_logits) = record_policy_objective(&log_probs, r, r.advantage, coefs);
                    params.contract_policy_grad(&trace, &d_logits, tgrad)
                }
                DotMethod::Naive => {
                    let (_, g) = record_grad(params, r, coefs)?;
                    g.dot(tgrad)?
                }
            };
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite(format!("influence of record {}", r.record_id)))
            }
        })
        .collect()
}

/// Influence using only the round's starting parameters θ^(k).
pub fn influence_single_checkpoint(
    params: &PolicyValueParams,
    buffer: &RolloutBuffer,
    target: TargetFunction<'_>,
    coefs: ObjectiveCoefs,
    method: DotMethod,
) -> Result<InfluenceReport> {
    let tgrad = target_grad(params, target)?;
    let indices: Vec<usize> = (0..buffer.len()).collect();
    let scores = dot_scores(params, buffer, &indices, &tgrad, coefs, method)?;
    Ok(InfluenceReport {
        round: buffer.round,
        mode: InfluenceMode::SingleCheckpoint,
        target: target.kind(),
        scores,
        target_grad_norm: tgrad.norm(),
    })
}

/// Influence summed over every optimization step of the round that
/// included the record, each term evaluated at that step's parameters.
pub fn influence_full_tracin(
    trace: &StepTrace,
    buffer: &RolloutBuffer,
    target: TargetFunction<'_>,
    coefs: ObjectiveCoefs,
) -> Result<InfluenceReport> {
    if trace.steps.is_empty() || trace.steps.iter().any(|s| s.checkpoint.is_none()) {
        return Err(Error::MissingCheckpoints);
    }
    let mut position = vec![usize::MAX; buffer.max_record_id() + 1];
    for (i, r) in buffer.records.iter().enumerate() {
        position[r.record_id] = i;
    }
    let mut scores = vec![0.0; buffer.len()];
    let mut norm_sum = 0.0;
    for step in &trace.steps {
        let params = step.checkpoint.as_ref().expect("checked above");
        let tgrad = target_grad(params, target)?;
        norm_sum += tgrad.norm();
        let indices: Vec<usize> = step
            .members
            .iter()
            .map(|&id| match position.get(id) {
                Some(&p) if p != usize::MAX => Ok(p),
                _ => Err(Error::ShapeMismatch {
                    expected: buffer.len(),
                    got: id,
                }),
            })
            .collect::<Result<_>>()?;
        let partial = dot_scores(params, buffer, &indices, &tgrad, coefs, DotMethod::Ghost)?;
        for (&i, s) in indices.iter().zip(partial) {
            scores[i] += s;
        }
    }
    Ok(InfluenceReport {
        round: buffer.round,
        mode: InfluenceMode::FullTracIn,
        target: target.kind(),
        scores,
        target_grad_norm: norm_sum / trace.steps.len() as f64,
    })
}
