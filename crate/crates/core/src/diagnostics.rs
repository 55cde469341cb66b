//! Analysis tools built on influence scores: advantage oracles and
//! sign-mismatch analysis, rank correlation, similarity-graph roughness and
//! single-round filtering interventions.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attribution::{influence_single_checkpoint, DotMethod, InfluenceReport, TargetFunction};
use crate::env::{Environment, TabularMdp};
use crate::error::{Error, Result};
use crate::filtering::{bottom_record_positions, random_filter};
use crate::nn::PolicyValueParams;
use crate::ppo::{collect_rollout, evaluate, ppo_update, ObjectiveCoefs, PpoConfig, RolloutBuffer, UpdateOptions};
use crate::rng::{labels, stream};

/// Dense `(state, action)` table of return averages and advantages.
/// Entries are `None` where the oracle is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McAdvantageTable {
    pub n_states: usize,
    pub n_actions: usize,
    /// Indexed `state * n_actions + action`.
    pub q_bar: Vec<Option<f64>>,
    pub v_bar: Vec<Option<f64>>,
    pub a_bar: Vec<Option<f64>>,
    pub q_visits: Vec<usize>,
    pub v_visits: Vec<usize>,
}

impl McAdvantageTable {
    pub fn advantage(&self, state: usize, action: usize) -> Option<f64> {
        self.a_bar.get(state * self.n_actions + action).copied().flatten()
    }

    /// Oracle advantage of each record, in buffer order.
    pub fn for_buffer(&self, buffer: &RolloutBuffer) -> Vec<Option<f64>> {
        buffer
            .records
            .iter()
            .map(|r| r.state.and_then(|s| self.advantage(s, r.action)))
            .collect()
    }
}

/// Monte-Carlo return averages from the buffer's own trajectories.
///
/// Only episodes that end inside the buffer (terminal or step cap) are
/// used; the partial episode at the end of the buffer is skipped. Entries
/// with fewer than `min_visits` samples stay undefined.
pub fn mc_advantage(env: &dyn Environment, buffer: &RolloutBuffer, gamma: f64, min_visits: usize) -> Result<McAdvantageTable> {
    let mdp = env.as_tabular().ok_or(Error::OracleUnavailable(env.name().to_string()))?;
    mc_advantage_from_buffer(mdp.n_states(), mdp.n_actions(), buffer, gamma, min_visits)
}

pub fn mc_advantage_from_buffer(
    n_states: usize,
    n_actions: usize,
    buffer: &RolloutBuffer,
    gamma: f64,
    min_visits: usize,
) -> Result<McAdvantageTable> {
    let mut q_sum = vec![0.0; n_states * n_actions];
    let mut q_visits = vec![0usize; n_states * n_actions];
    let mut v_sum = vec![0.0; n_states];
    let mut v_visits = vec![0usize; n_states];

    let mut start = 0;
    for (i, r) in buffer.records.iter().enumerate() {
        if !(r.done || r.truncated) {
            continue;
        }
        let mut g = 0.0;
        for rec in buffer.records[start..=i].iter().rev() {
            g = rec.reward + gamma * g;
            let s = rec.state.ok_or(Error::OracleUnavailable("record without a state index".into()))?;
            if s >= n_states || rec.action >= n_actions {
                return Err(Error::ShapeMismatch {
                    expected: n_states * n_actions,
                    got: s * n_actions + rec.action,
                });
            }
            q_sum[s * n_actions + rec.action] += g;
            q_visits[s * n_actions + rec.action] += 1;
            v_sum[s] += g;
            v_visits[s] += 1;
        }
        start = i + 1;
    }

    let mean = |sum: f64, n: usize| (n >= min_visits.max(1)).then(|| sum / n as f64);
    let q_bar: Vec<Option<f64>> = q_sum.iter().zip(&q_visits).map(|(&s, &n)| mean(s, n)).collect();
    let v_bar: Vec<Option<f64>> = v_sum.iter().zip(&v_visits).map(|(&s, &n)| mean(s, n)).collect();
    let a_bar = (0..n_states * n_actions)
        .map(|i| Some(q_bar[i]? - v_bar[i / n_actions]?))
        .collect();
    Ok(McAdvantageTable {
        n_states,
        n_actions,
        q_bar,
        v_bar,
        a_bar,
        q_visits,
        v_visits,
    })
}

/// Action probabilities of `params` at every state of `mdp`.
pub fn policy_table(params: &PolicyValueParams, mdp: &dyn TabularMdp) -> Result<Vec<Vec<f64>>> {
    (0..mdp.n_states())
        .map(|s| Ok(params.log_probs(&mdp.observation(s))?.iter().map(|l| l.exp()).collect()))
        .collect()
}

/// Exact infinite-horizon policy evaluation: solves `(I − γ P_π) V = R_π`
/// with absorbing states pinned to zero. Returns `(V, Q)` with `Q` indexed
/// `state * n_actions + action`.
pub fn policy_evaluation(mdp: &dyn TabularMdp, policy: &[Vec<f64>], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if policy.len() != ns {
        return Err(Error::ShapeMismatch { expected: ns, got: policy.len() });
    }
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in (0..ns).filter(|&s| !mdp.is_absorbing(s)) {
        for (act, &pi) in policy[s].iter().enumerate().take(na) {
            let (next, r, done) = mdp.transition(s, act);
            b[s] += pi * r;
            if !done && !mdp.is_absorbing(next) {
                a[(s, next)] -= gamma * pi;
            }
        }
    }
    let v = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateInput("singular policy-evaluation system".into()))?;
    let mut q = vec![0.0; ns * na];
    for s in (0..ns).filter(|&s| !mdp.is_absorbing(s)) {
        for act in 0..na {
            let (next, r, done) = mdp.transition(s, act);
            let cont = if done || mdp.is_absorbing(next) { 0.0 } else { v[next] };
            q[s * na + act] = r + gamma * cont;
        }
    }
    Ok((v.iter().copied().collect(), q))
}

/// Exact advantages `Q^π − V^π` of the policy in `params`, as a table with
/// every non-absorbing entry defined.
pub fn exact_advantage(env: &dyn Environment, params: &PolicyValueParams, gamma: f64) -> Result<McAdvantageTable> {
    let mdp = env.as_tabular().ok_or(Error::OracleUnavailable(env.name().to_string()))?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let (v, q) = policy_evaluation(mdp, &policy_table(params, mdp)?, gamma)?;
    let live = |s: usize| !mdp.is_absorbing(s);
    Ok(McAdvantageTable {
        n_states: ns,
        n_actions: na,
        q_bar: (0..ns * na).map(|i| live(i / na).then(|| q[i])).collect(),
        v_bar: (0..ns).map(|s| live(s).then(|| v[s])).collect(),
        a_bar: (0..ns * na).map(|i| live(i / na).then(|| q[i] - v[i / na])).collect(),
        q_visits: vec![0; ns * na],
        v_visits: vec![0; ns],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub record_id: usize,
    /// 1 = most positive influence.
    pub rank: usize,
    pub influence: f64,
    pub advantage: f64,
    pub oracle_advantage: f64,
    pub abs_error: f64,
    pub sign_agree: bool,
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchAnalysis {
    pub rows: Vec<MismatchRow>,
    /// Records whose oracle entry is undefined (left out of `rows`).
    pub undefined: Vec<usize>,
}

impl MismatchAnalysis {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record_id,rank,influence,advantage,oracle_advantage,abs_error,sign_agree,product\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?},{},{:?}\n",
                r.record_id, r.rank, r.influence, r.advantage, r.oracle_advantage, r.abs_error, r.sign_agree, r.product
            ));
        }
        out
    }

    /// Fraction of sign mismatches among rows whose rank falls in
    /// `[lo, hi)` as fractions of the ranked list.
    pub fn mismatch_fraction(&self, lo: f64, hi: f64) -> f64 {
        let n = self.rows.len() as f64;
        let sel: Vec<&MismatchRow> = self
            .rows
            .iter()
            .filter(|r| {
                let q = (r.rank - 1) as f64 / n;
                q >= lo && q < hi
            })
            .collect();
        if sel.is_empty() {
            return 0.0;
        }
        sel.iter().filter(|r| !r.sign_agree).count() as f64 / sel.len() as f64
    }
}

/// Rank records by decreasing influence (ties by record id) and compare
/// each record's estimated advantage with the oracle.
pub fn mismatch_analysis(buffer: &RolloutBuffer, report: &InfluenceReport, oracle: &[Option<f64>]) -> Result<MismatchAnalysis> {
    let n = buffer.len();
    if report.scores.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: report.scores.len() });
    }
    if oracle.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: oracle.len() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        report.scores[b]
            .partial_cmp(&report.scores[a])
            .unwrap_or(Ordering::Equal)
            .then(buffer.records[a].record_id.cmp(&buffer.records[b].record_id))
    });
    let mut rows = Vec::with_capacity(n);
    let mut undefined = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let r = &buffer.records[i];
        match oracle[i] {
            Some(bar) => rows.push(MismatchRow {
                record_id: r.record_id,
                rank: pos + 1,
                influence: report.scores[i],
                advantage: r.advantage,
                oracle_advantage: bar,
                abs_error: (bar - r.advantage).abs(),
                sign_agree: bar * r.advantage >= 0.0,
                product: bar * r.advantage,
            }),
            None => undefined.push(r.record_id),
        }
    }
    if !undefined.is_empty() {
        log::debug!("{} records without an oracle advantage", undefined.len());
    }
    Ok(MismatchAnalysis { rows, undefined })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch { expected: x.len(), got: y.len() });
    }
    if x.is_empty() {
        return Err(Error::DegenerateInput("empty input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y)).ok_or_else(|| Error::DegenerateInput("constant input".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    /// Record ids of the nodes.
    pub node_ids: Vec<usize>,
    /// Influence scores scaled by their maximum absolute value.
    pub node_values: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    /// Undirected edges `(i, j, w)` with `i < j` as node positions.
    pub edges: Vec<(usize, usize, f64)>,
    pub sigma: f64,
    pub u: usize,
}

/// Normalized Dirichlet energy `Σ w (Ĩ_i − Ĩ_j)² / Σ w` over the edges.
pub fn roughness(graph: &SimilarityGraph) -> Result<f64> {
    if graph.edges.is_empty() {
        return Err(Error::NoEdges);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(i, j, w) in &graph.edges {
        num += w * (graph.node_values[i] - graph.node_values[j]).powi(2);
        den += w;
    }
    Ok(num / den)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Graph over the given nodes: Gaussian weights with the median pairwise
/// distance as bandwidth (1 if that median is zero), each node linked to
/// its `u` nearest neighbours (plus any tied with the u-th), an edge kept
/// if either endpoint picks it.
pub fn knn_graph(node_ids: Vec<usize>, values: &[f64], embeddings: Vec<Vec<f64>>, u: usize) -> Result<SimilarityGraph> {
    let n = node_ids.len();
    if n < 2 {
        return Err(Error::TooFewPositive(n));
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let node_values: Vec<f64> = values.iter().map(|v| if scale > 0.0 { v / scale } else { 0.0 }).collect();

    let mut dist = vec![0.0; n * n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            pairs.push(d);
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let m = pairs.len();
    let median = if m % 2 == 1 { pairs[m / 2] } else { 0.5 * (pairs[m / 2 - 1] + pairs[m / 2]) };
    let sigma = if median > 0.0 { median } else { 1.0 };

    let mut keep = vec![false; n * n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist[i * n + a].partial_cmp(&dist[i * n + b]).unwrap_or(Ordering::Equal));
        if u == 0 {
            continue;
        }
        let uth = others[u.min(others.len()) - 1];
        // Neighbours tied with the u-th one are all kept, so the graph does
        // not depend on record order.
        let radius = dist[i * n + uth];
        for &j in others.iter().take_while(|&&j| dist[i * n + j] <= radius) {
            keep[i.min(j) * n + i.max(j)] = true;
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if keep[i * n + j] {
                let d = dist[i * n + j];
                edges.push((i, j, (-(d * d) / (sigma * sigma)).exp()));
            }
        }
    }
    Ok(SimilarityGraph {
        node_ids,
        node_values,
        embeddings,
        edges,
        sigma,
        u,
    })
}

/// Similarity graph over the positive-influence records, embedded by the
/// last hidden layer of `final_params`' policy network.
pub fn build_similarity_graph(
    buffer: &RolloutBuffer,
    report: &InfluenceReport,
    final_params: &PolicyValueParams,
    u: usize,
) -> Result<SimilarityGraph> {
    if report.scores.len() != buffer.len() {
        return Err(Error::ShapeMismatch {
            expected: buffer.len(),
            got: report.scores.len(),
        });
    }
    let nodes: Vec<usize> = (0..buffer.len()).filter(|&i| report.scores[i] > 0.0).collect();
    if nodes.len() < 2 {
        return Err(Error::TooFewPositive(nodes.len()));
    }
    let values: Vec<f64> = nodes.iter().map(|&i| report.scores[i]).collect();
    let embeddings = nodes
        .iter()
        .map(|&i| Ok(final_params.policy_forward(&buffer.records[i].obs)?.2))
        .collect::<Result<Vec<_>>>()?;
    let ids = nodes.iter().map(|&i| buffer.records[i].record_id).collect();
    knn_graph(ids, &values, embeddings, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    /// Drop the most negative-influence records.
    Influence,
    /// Drop the same number of records uniformly at random.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub round: u64,
    pub kind: InterventionKind,
    pub n_removed: usize,
    pub return_full: f64,
    pub return_filtered: f64,
    pub delta: f64,
}

/// Collect round `params.round`'s buffer, then train one copy of `params`
/// on all of it and another on a filtered copy, with the same shuffle and
/// evaluation streams. `delta` is filtered minus full test return.
pub fn single_round_intervention(
    env: &mut dyn Environment,
    params: &PolicyValueParams,
    config: &PpoConfig,
    seed: u64,
    p: f64,
    kind: InterventionKind,
    eval_episodes: usize,
) -> Result<InterventionOutcome> {
    let k = params.round;
    let buffer = collect_rollout(env, params, config, &mut stream(seed, labels::COLLECT, k))?;
    let report = influence_single_checkpoint(
        params,
        &buffer,
        TargetFunction::Return { validation: &buffer },
        ObjectiveCoefs::from(config),
        DotMethod::Ghost,
    )?;
    let drop = bottom_record_positions(&buffer, &report.scores, p)?;
    let filtered = match kind {
        InterventionKind::Influence => {
            let mut removed = vec![false; buffer.len()];
            drop.iter().for_each(|&i| removed[i] = true);
            let mut i = 0;
            buffer.retain_copy(|_| {
                i += 1;
                !removed[i - 1]
            })
        }
        InterventionKind::Random => random_filter(&buffer, drop.len(), &mut stream(seed, labels::FILTER, k)),
    };
    let opts = UpdateOptions::default();
    let (full, _) = ppo_update(params, &buffer, config, &mut stream(seed, labels::SHUFFLE, k), &opts)?;
    let (filt, _) = ppo_update(params, &filtered, config, &mut stream(seed, labels::SHUFFLE, k), &opts)?;
    let return_full = evaluate(&full, env, eval_episodes, &mut stream(seed, labels::EVAL, k))?;
    let return_filtered = evaluate(&filt, env, eval_episodes, &mut stream(seed, labels::EVAL, k))?;
    Ok(InterventionOutcome {
        round: k,
        kind,
        n_removed: buffer.len() - filtered.len(),
        return_full,
        return_filtered,
        delta: return_filtered - return_full,
    })
}

pub fn intervention_csv(rows: &[(u64, InterventionOutcome)]) -> String {
    let mut out = String::from("seed,round,kind,n_removed,return_full,return_filtered,delta\n");
    for (seed, o) in rows {
        let kind = match o.kind {
            InterventionKind::Influence => "influence",
            InterventionKind::Random => "random",
        };
        out.push_str(&format!(
            "{},{},{},{},{:?},{:?},{:?}\n",
            seed, o.round, kind, o.n_removed, o.return_full, o.return_filtered, o.delta
        ));
    }
    out
}
