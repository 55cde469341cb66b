//! Experience filters applied to a rollout buffer before the PPO update.
//!
//! Influence-based filtering drops the most negative-influence records;
//! the remaining filters are comparison baselines (random drop, advantage
//! sign-mismatch heuristics, rank-based TD-error reweighting and reward
//! extremes). Every filter is a pure function of its inputs and returns a
//! new buffer with survivors in their original order.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attribution::InfluenceReport;
use crate::error::{Error, Result};
use crate::nn::PolicyValueParams;
use crate::ppo::RolloutBuffer;
use crate::rng::Rng;

/// Sign-mismatch heuristic variant: 1 ranks by `|Ā − Â|`, 2 by `Ā·Â`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvVariant {
    MagnitudeError,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterStrategy {
    /// No filtering.
    Standard,
    /// Drop the fraction `p` of negative-influence records.
    Iif { p: f64 },
    /// Drop a random subset; `fraction` applies when no paired count exists.
    Random { fraction: f64 },
    AdvHeuristic { variant: AdvVariant, p: f64 },
    TdRank { alpha: f64 },
    RewardExtremes { p: f64 },
}

impl FilterStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            FilterStrategy::Standard => "standard",
            FilterStrategy::Iif { .. } => "iif",
            FilterStrategy::Random { .. } => "random",
            FilterStrategy::AdvHeuristic { variant: AdvVariant::MagnitudeError, .. } => "adv1",
            FilterStrategy::AdvHeuristic { variant: AdvVariant::Product, .. } => "adv2",
            FilterStrategy::TdRank { .. } => "td",
            FilterStrategy::RewardExtremes { .. } => "reward",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64| {
            if p > 0.0 && p <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("p must lie in (0, 1], got {p}")))
            }
        };
        match *self {
            FilterStrategy::Standard => Ok(()),
            FilterStrategy::Iif { p }
            | FilterStrategy::AdvHeuristic { p, .. }
            | FilterStrategy::RewardExtremes { p } => check_p(p),
            FilterStrategy::Random { fraction } => {
                if (0.0..=1.0).contains(&fraction) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("random fraction must lie in [0, 1], got {fraction}")))
                }
            }
            FilterStrategy::TdRank { alpha } => {
                if alpha > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("alpha must be positive, got {alpha}")))
                }
            }
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Strategy names as used on the command line; parameters come from
/// the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyName {
    Standard,
    Iif,
    Random,
    Adv1,
    Adv2,
    Td,
    Reward,
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" | "std" => StrategyName::Standard,
            "iif" => StrategyName::Iif,
            "random" => StrategyName::Random,
            "adv1" => StrategyName::Adv1,
            "adv2" => StrategyName::Adv2,
            "td" => StrategyName::Td,
            "reward" => StrategyName::Reward,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Standard => "standard",
            StrategyName::Iif => "iif",
            StrategyName::Random => "random",
            StrategyName::Adv1 => "adv1",
            StrategyName::Adv2 => "adv2",
            StrategyName::Td => "td",
            StrategyName::Reward => "reward",
        }
    }
}

/// Default IIF fraction per environment family.
pub fn default_iif_p(env: crate::env::EnvId) -> f64 {
    match env {
        crate::env::EnvId::EmptyGrid8x8 => 0.125,
        _ => 0.5,
    }
}

/// Record positions (into the buffer) removed by influence filtering:
/// the `⌈p·m⌉` most negative of the `m` negative scores, ties broken by
/// smaller record id.
pub fn bottom_record_positions(buffer: &RolloutBuffer, scores: &[f64], p: f64) -> Result<Vec<usize>> {
    if scores.len() != buffer.len() {
        return Err(Error::ShapeMismatch {
            expected: buffer.len(),
            got: scores.len(),
        });
    }
    let mut negative: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] < 0.0).collect();
    let k = (p * negative.len() as f64).ceil() as usize;
    negative.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then(buffer.records[a].record_id.cmp(&buffer.records[b].record_id))
    });
    negative.truncate(k.min(negative.len()));
    Ok(negative)
}

fn drop_positions(buffer: &RolloutBuffer, positions: &[usize]) -> RolloutBuffer {
    let mut removed = vec![false; buffer.len()];
    for &p in positions {
        removed[p] = true;
    }
    let mut i = 0;
    buffer.retain_copy(|_| {
        let keep = !removed[i];
        i += 1;
        keep
    })
}

/// Remove the bottom `⌈p·m⌉` negative-influence records.
pub fn discard_bottom_records(buffer: &RolloutBuffer, report: &InfluenceReport, p: f64) -> Result<RolloutBuffer> {
    let positions = bottom_record_positions(buffer, &report.scores, p)?;
    Ok(drop_positions(buffer, &positions))
}

/// Remove `count` uniformly chosen records.
pub fn random_filter(buffer: &RolloutBuffer, count: usize, rng: &mut Rng) -> RolloutBuffer {
    let count = count.min(buffer.len());
    let positions = index::sample(rng, buffer.len(), count).into_vec();
    drop_positions(buffer, &positions)
}

/// Sign-mismatch heuristics. `mc_advantage[i]` is the oracle advantage of
/// record `i` (buffer order), `None` where undefined; such records, and
/// every record whose signs agree, are kept. Among mismatched records the
/// top `⌈p·m⌉` by `|Ā − Â|` (variant 1) or the bottom by `Ā·Â` (variant 2)
/// are dropped.
pub fn advantage_heuristic_filter(
    buffer: &RolloutBuffer,
    mc_advantage: &[Option<f64>],
    variant: AdvVariant,
    p: f64,
) -> Result<RolloutBuffer> {
    if mc_advantage.len() != buffer.len() {
        return Err(Error::ShapeMismatch {
            expected: buffer.len(),
            got: mc_advantage.len(),
        });
    }
    // Sort key: smaller is dropped first.
    let mut mismatched: Vec<(usize, f64)> = buffer
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let bar = mc_advantage[i]?;
            (bar * r.advantage < 0.0).then(|| {
                let key = match variant {
                    AdvVariant::MagnitudeError => -(bar - r.advantage).abs(),
                    AdvVariant::Product => bar * r.advantage,
                };
                (i, key)
            })
        })
        .collect();
    let k = (p * mismatched.len() as f64).ceil() as usize;
    mismatched.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(buffer.records[a.0].record_id.cmp(&buffer.records[b.0].record_id))
    });
    let positions: Vec<usize> = mismatched.iter().take(k).map(|&(i, _)| i).collect();
    Ok(drop_positions(buffer, &positions))
}

/// TD error `r + γ·V(s')·(1 − terminal) − V(s)` for every record.
pub fn td_errors(buffer: &RolloutBuffer, params: &PolicyValueParams, gamma: f64) -> Result<Vec<f64>> {
    buffer
        .records
        .iter()
        .map(|r| {
            let next = if r.done { 0.0 } else { params.value_forward(&r.next_obs)? };
            Ok(r.reward + gamma * next - params.value_forward(&r.obs)?)
        })
        .collect()
}

/// Rank-based priorities: rank by `|δ|` descending (ties by record id),
/// `P = 1/rank`, weights `P^α / Σ P^α`.
pub fn rank_weights(td: &[f64], record_ids: &[usize], alpha: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..td.len()).collect();
    order.sort_by(|&a, &b| {
        td[b]
            .abs()
            .partial_cmp(&td[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(record_ids[a].cmp(&record_ids[b]))
    });
    let mut w = vec![0.0; td.len()];
    for (rank0, &i) in order.iter().enumerate() {
        w[i] = (1.0 / (rank0 + 1) as f64).powf(alpha);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

pub fn td_rank_weights(buffer: &RolloutBuffer, params: &PolicyValueParams, gamma: f64, alpha: f64) -> Result<Vec<f64>> {
    let td = td_errors(buffer, params, gamma)?;
    let ids: Vec<usize> = buffer.records.iter().map(|r| r.record_id).collect();
    Ok(rank_weights(&td, &ids, alpha))
}

/// Remove the `⌈p·n/2⌉` highest-reward and then the `⌈p·n/2⌉` lowest-reward
/// of the remaining records (ties by record id).
pub fn reward_extremes_filter(buffer: &RolloutBuffer, p: f64) -> RolloutBuffer {
    let n = buffer.len();
    let k = (p * n as f64 / 2.0).ceil() as usize;
    let by = |desc: bool| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (buffer.records[a].reward, buffer.records[b].reward);
            let ord = if desc { rb.partial_cmp(&ra) } else { ra.partial_cmp(&rb) };
            ord.unwrap_or(Ordering::Equal)
                .then(buffer.records[a].record_id.cmp(&buffer.records[b].record_id))
        });
        idx
    };
    let top: Vec<usize> = by(true).into_iter().take(k).collect();
    let mut removed = vec![false; n];
    top.iter().for_each(|&i| removed[i] = true);
    let bottom: Vec<usize> = by(false).into_iter().filter(|&i| !removed[i]).take(k).collect();
    let positions: Vec<usize> = top.into_iter().chain(bottom).collect();
    drop_positions(buffer, &positions)
}
