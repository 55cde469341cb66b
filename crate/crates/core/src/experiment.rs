//! Experiment orchestration: configuration, the per-round training loop,
//! run matrices with on-disk artifacts, and drivers for attribution,
//! diagnostics and summary reports.
//!
//! Every cell is identified by `(strategy, seed)`. All randomness inside a
//! cell comes from labeled streams of the cell seed, indexed by round, so a
//! cell can be resumed from any saved checkpoint and reproduces the same
//! bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{
    influence_full_tracin, influence_single_checkpoint, DotMethod, InfluenceMode, InfluenceReport, TargetFunction,
    TargetKind,
};
use crate::diagnostics::{
    build_similarity_graph, exact_advantage, intervention_csv, mc_advantage, mismatch_analysis, roughness,
    single_round_intervention, InterventionKind, InterventionOutcome,
};
use crate::env::{EnvId, Environment};
use crate::error::{Error, Result};
use crate::filtering::{
    advantage_heuristic_filter, default_iif_p, discard_bottom_records, random_filter, reward_extremes_filter,
    td_rank_weights, AdvVariant, FilterStrategy, StrategyName,
};
use crate::metrics::{rt_peak, se_metrics, seed_stats, RoundRow, RunLog};
use crate::nn::{Arch, PolicyValueParams};
use crate::ppo::{collect_rollout, evaluate, ppo_update, ObjectiveCoefs, PpoConfig, Sampling, UpdateOptions};
use crate::rng::{labels, stream};

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "IIF_OUTPUT_DIR";

/// What the `wall_ms_*` columns measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Deterministic cost model counted in record passes (one forward or
    /// one backward pass of one record). Keeps logs byte-reproducible.
    Work,
    /// Measured wall-clock milliseconds.
    Wall,
}

impl FromStr for Clock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "work" => Ok(Clock::Work),
            "wall" => Ok(Clock::Wall),
            _ => Err(Error::Config(format!("unknown clock `{s}` (expected work or wall)"))),
        }
    }
}

impl fmt::Display for Clock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Clock::Work => "work",
            Clock::Wall => "wall",
        })
    }
}

/// Where a resolved configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub ppo: PpoConfig,
    pub strategies: Vec<StrategyName>,
    /// Fraction for the p-parameterized filters; `None` uses the
    /// environment default.
    pub p: Option<f64>,
    /// Random-drop fraction when no paired filtered run is available.
    pub random_fraction: f64,
    /// Pair the random baseline with the filtered run's per-round counts.
    pub random_pairing: bool,
    pub td_alpha: f64,
    pub min_visits: usize,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub output_dir: PathBuf,
    pub clock: Clock,
    /// Save per-round influence reports of filtered runs.
    pub save_reports: bool,
    pub workers: usize,
    pub provenance: BTreeMap<String, Source>,
}

pub const CONFIG_KEYS: &[&str] = &[
    "env",
    "n_steps",
    "batch_size",
    "n_epochs",
    "lr",
    "clip_range",
    "gamma",
    "gae_lambda",
    "vf_coef",
    "ent_coef",
    "max_grad_norm",
    "rounds",
    "normalize_advantage",
    "strategies",
    "p",
    "random_fraction",
    "random_pairing",
    "td_alpha",
    "min_visits",
    "seeds",
    "eval_episodes",
    "output_dir",
    "clock",
    "save_reports",
    "workers",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let output_dir = std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        ExperimentConfig {
            env: EnvId::FrozenLake4x4,
            ppo: PpoConfig::default(),
            strategies: vec![StrategyName::Standard, StrategyName::Iif],
            p: None,
            random_fraction: 0.25,
            random_pairing: true,
            td_alpha: 0.6,
            min_visits: 3,
            seeds: vec![0],
            eval_episodes: 1000,
            output_dir,
            clock: Clock::Work,
            save_reports: false,
            workers: 1,
            provenance: CONFIG_KEYS.iter().map(|k| (k.to_string(), Source::Default)).collect(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid boolean `{value}` for `{key}`")),
    }
}

/// Seeds as a comma list (`0,3,4`) or a half-open range (`0..5`).
pub fn parse_seeds(value: &str) -> std::result::Result<Vec<u64>, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = value.split_once("..") {
        let a: u64 = parse_value("seeds", a.trim())?;
        let b: u64 = parse_value("seeds", b.trim())?;
        (a..b).collect()
    } else {
        value
            .split(',')
            .map(|s| parse_value("seeds", s.trim()))
            .collect::<std::result::Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

impl ExperimentConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let ctx = |m: String| Error::Parse {
            context: format!("{source:?} setting `{key}`").to_lowercase(),
            message: m,
        };
        let v = value.trim();
        match key {
            "env" => self.env = v.parse().map_err(|e: Error| ctx(e.to_string()))?,
            "n_steps" => self.ppo.n_steps = parse_value(key, v).map_err(ctx)?,
            "batch_size" => self.ppo.batch_size = parse_value(key, v).map_err(ctx)?,
            "n_epochs" => self.ppo.n_epochs = parse_value(key, v).map_err(ctx)?,
            "lr" => self.ppo.lr = parse_value(key, v).map_err(ctx)?,
            "clip_range" => self.ppo.clip_range = parse_value(key, v).map_err(ctx)?,
            "gamma" => self.ppo.gamma = parse_value(key, v).map_err(ctx)?,
            "gae_lambda" => self.ppo.gae_lambda = parse_value(key, v).map_err(ctx)?,
            "vf_coef" => self.ppo.vf_coef = parse_value(key, v).map_err(ctx)?,
            "ent_coef" => self.ppo.ent_coef = parse_value(key, v).map_err(ctx)?,
            "max_grad_norm" => self.ppo.max_grad_norm = parse_value(key, v).map_err(ctx)?,
            "rounds" => self.ppo.total_rounds = parse_value(key, v).map_err(ctx)?,
            "normalize_advantage" => self.ppo.normalize_advantage = parse_bool(key, v).map_err(ctx)?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .map(|s| s.trim().parse::<StrategyName>())
                    .collect::<Result<_>>()
                    .map_err(|e| ctx(e.to_string()))?
            }
            "p" => {
                let p: f64 = parse_value(key, v).map_err(ctx)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(ctx(format!("p must lie in (0, 1], got {p}")));
                }
                self.p = Some(p);
            }
            "random_fraction" => self.random_fraction = parse_value(key, v).map_err(ctx)?,
            "random_pairing" => self.random_pairing = parse_bool(key, v).map_err(ctx)?,
            "td_alpha" => self.td_alpha = parse_value(key, v).map_err(ctx)?,
            "min_visits" => self.min_visits = parse_value(key, v).map_err(ctx)?,
            "seeds" => self.seeds = parse_seeds(v).map_err(ctx)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, v).map_err(ctx)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "clock" => self.clock = v.parse().map_err(|e: Error| ctx(e.to_string()))?,
            "save_reports" => self.save_reports = parse_bool(key, v).map_err(ctx)?,
            "workers" => self.workers = parse_value(key, v).map_err(ctx)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        self.provenance.insert(key.to_string(), source);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.eval_episodes == 0 || self.ppo.total_rounds == 0 || self.workers == 0 {
            return Err(Error::Config("eval_episodes, rounds and workers must be positive".into()));
        }
        for s in &self.strategies {
            self.strategy(*s).validate()?;
        }
        Ok(())
    }

    pub fn filter_p(&self) -> f64 {
        self.p.unwrap_or_else(|| default_iif_p(self.env))
    }

    pub fn strategy(&self, name: StrategyName) -> FilterStrategy {
        let p = self.filter_p();
        match name {
            StrategyName::Standard => FilterStrategy::Standard,
            StrategyName::Iif => FilterStrategy::Iif { p },
            StrategyName::Random => FilterStrategy::Random {
                fraction: self.random_fraction,
            },
            StrategyName::Adv1 => FilterStrategy::AdvHeuristic {
                variant: AdvVariant::MagnitudeError,
                p,
            },
            StrategyName::Adv2 => FilterStrategy::AdvHeuristic {
                variant: AdvVariant::Product,
                p,
            },
            StrategyName::Td => FilterStrategy::TdRank { alpha: self.td_alpha },
            StrategyName::Reward => FilterStrategy::RewardExtremes { p },
        }
    }

    /// Canonical `key = value` text of every setting (re-parseable).
    pub fn to_config_text(&self) -> String {
        let c = &self.ppo;
        let strategies: Vec<&str> = self.strategies.iter().map(|s| s.as_str()).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut lines = vec![
            format!("env = {}", self.env),
            format!("n_steps = {}", c.n_steps),
            format!("batch_size = {}", c.batch_size),
            format!("n_epochs = {}", c.n_epochs),
            format!("lr = {:?}", c.lr),
            format!("clip_range = {:?}", c.clip_range),
            format!("gamma = {:?}", c.gamma),
            format!("gae_lambda = {:?}", c.gae_lambda),
            format!("vf_coef = {:?}", c.vf_coef),
            format!("ent_coef = {:?}", c.ent_coef),
            format!("max_grad_norm = {:?}", c.max_grad_norm),
            format!("rounds = {}", c.total_rounds),
            format!("normalize_advantage = {}", c.normalize_advantage),
            format!("strategies = {}", strategies.join(",")),
        ];
        if let Some(p) = self.p {
            lines.push(format!("p = {p:?}"));
        }
        lines.extend([
            format!("random_fraction = {:?}", self.random_fraction),
            format!("random_pairing = {}", self.random_pairing),
            format!("td_alpha = {:?}", self.td_alpha),
            format!("min_visits = {}", self.min_visits),
            format!("seeds = {}", seeds.join(",")),
            format!("eval_episodes = {}", self.eval_episodes),
            format!("output_dir = {}", self.output_dir.display()),
            format!("clock = {}", self.clock),
            format!("save_reports = {}", self.save_reports),
            format!("workers = {}", self.workers),
        ]);
        lines.join("\n") + "\n"
    }

    /// Hash of every setting that can change results (the output location
    /// and worker count are excluded).
    pub fn config_hash(&self) -> String {
        let text: String = self
            .to_config_text()
            .lines()
            .filter(|l| !l.starts_with("output_dir") && !l.starts_with("workers"))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn provenance_text(&self) -> String {
        self.provenance
            .iter()
            .map(|(k, s)| format!("{k}: {}\n", format!("{s:?}").to_lowercase()))
            .collect()
    }
}

/// Resolve a configuration: defaults, then the optional `key = value`
/// file, then flag overrides. Unknown keys are rejected.
pub fn parse_config(file_text: Option<&str>, flags: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(text) = file_text {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: format!("line {}", lineno + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value, Source::File).map_err(|e| match e {
                Error::Parse { message, .. } => Error::Parse {
                    context: format!("line {}", lineno + 1),
                    message,
                },
                other => other,
            })?;
        }
    }
    for (key, value) in flags {
        cfg.set(key, value, Source::Flag)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Training loop

/// Everything a round needs besides the parameters.
pub struct RoundContext<'a> {
    pub env: &'a mut dyn Environment,
    pub ppo: &'a PpoConfig,
    pub strategy: FilterStrategy,
    pub seed: u64,
    pub eval_episodes: usize,
    pub clock: Clock,
    pub min_visits: usize,
}

pub struct RoundOutput {
    pub params: PolicyValueParams,
    pub row: RoundRow,
    pub report: Option<InfluenceReport>,
}

struct StageTimer {
    clock: Clock,
    start: Instant,
}

impl StageTimer {
    fn start(clock: Clock) -> Self {
        StageTimer {
            clock,
            start: Instant::now(),
        }
    }

    /// Measured milliseconds or the given work estimate.
    fn finish(self, work: f64) -> f64 {
        match self.clock {
            Clock::Work => work,
            Clock::Wall => self.start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// One training round from `params` (whose `round` field is k): collect,
/// filter according to the strategy, update, evaluate. `paired_count`
/// overrides the random baseline's drop count.
pub fn run_round(ctx: &mut RoundContext<'_>, params: &PolicyValueParams, paired_count: Option<usize>) -> Result<RoundOutput> {
    let k = params.round;
    let seed = ctx.seed;

    let t = StageTimer::start(ctx.clock);
    let buffer = collect_rollout(ctx.env, params, ctx.ppo, &mut stream(seed, labels::COLLECT, k))?;
    let n = buffer.len() as f64;
    let ms_collect = t.finish(n);

    let t = StageTimer::start(ctx.clock);
    let mut sampling = Sampling::Shuffle;
    let mut report = None;
    let (train, filter_work) = match ctx.strategy {
        FilterStrategy::Standard => (buffer.clone(), 0.0),
        FilterStrategy::Iif { p } => {
            let r = influence_single_checkpoint(
                params,
                &buffer,
                TargetFunction::Return { validation: &buffer },
                ObjectiveCoefs::from(ctx.ppo),
                DotMethod::Ghost,
            )?;
            let filtered = discard_bottom_records(&buffer, &r, p)?;
            report = Some(r);
            // Target gradient plus one contraction per record, each a
            // forward and a backward pass.
            (filtered, 4.0 * n)
        }
        FilterStrategy::Random { fraction } => {
            let count = paired_count.unwrap_or_else(|| (fraction * n).round() as usize);
            (random_filter(&buffer, count, &mut stream(seed, labels::FILTER, k)), 0.0)
        }
        FilterStrategy::AdvHeuristic { variant, p } => {
            let table = mc_advantage(ctx.env, &buffer, ctx.ppo.gamma, ctx.min_visits)?;
            (advantage_heuristic_filter(&buffer, &table.for_buffer(&buffer), variant, p)?, 0.0)
        }
        FilterStrategy::TdRank { alpha } => {
            sampling = Sampling::Weighted(td_rank_weights(&buffer, params, ctx.ppo.gamma, alpha)?);
            (buffer.clone(), 2.0 * n)
        }
        FilterStrategy::RewardExtremes { p } => (reward_extremes_filter(&buffer, p), 0.0),
    };
    let ms_influence = t.finish(filter_work);

    let t = StageTimer::start(ctx.clock);
    let options = UpdateOptions {
        sampling,
        keep_checkpoints: false,
    };
    let (next, _) = ppo_update(params, &train, ctx.ppo, &mut stream(seed, labels::SHUFFLE, k), &options)?;
    let ms_optimize = t.finish(2.0 * ctx.ppo.n_epochs as f64 * train.len() as f64);

    let test_return = evaluate(&next, ctx.env, ctx.eval_episodes, &mut stream(seed, labels::EVAL, k))?;
    Ok(RoundOutput {
        params: next,
        row: RoundRow {
            round: k as usize + 1,
            test_return,
            n_filtered: buffer.len() - train.len(),
            wall_ms_collect: ms_collect,
            wall_ms_influence: ms_influence,
            wall_ms_optimize: ms_optimize,
        },
        report,
    })
}

pub fn initial_params(env: &dyn Environment, seed: u64) -> PolicyValueParams {
    PolicyValueParams::init(Arch::standard(env.obs_dim(), env.n_actions()), &mut stream(seed, labels::INIT, 0))
}

/// On-disk layout of one cell.
#[derive(Debug, Clone)]
pub struct CellPaths {
    pub dir: PathBuf,
}

impl CellPaths {
    pub fn new(root: &Path, strategy: StrategyName, seed: u64) -> Self {
        CellPaths {
            dir: root.join(strategy.as_str()).join(format!("seed_{seed}")),
        }
    }

    pub fn runlog(&self) -> PathBuf {
        self.dir.join("runlog.csv")
    }

    pub fn checkpoint(&self, round: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("round_{round:04}.ckpt"))
    }

    pub fn report(&self, round: u64) -> PathBuf {
        self.dir.join("reports").join(format!("round_{round:04}.json"))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_params(path: &Path, params: &PolicyValueParams) -> Result<()> {
    let mut bytes = Vec::new();
    params.write_checkpoint(&mut bytes)?;
    write_atomic(path, &bytes)
}

fn load_params(path: &Path) -> Result<PolicyValueParams> {
    PolicyValueParams::read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

/// Saved progress of a cell: its log and the parameters after the last
/// logged round, when both are present and consistent.
fn resume_state(paths: &CellPaths, label: &str, seed: u64) -> Option<(RunLog, PolicyValueParams)> {
    let text = fs::read_to_string(paths.runlog()).ok()?;
    let log = RunLog::from_csv(label, seed, &text).ok()?;
    let params = load_params(&paths.checkpoint(log.rows.len() as u64)).ok()?;
    (params.round == log.rows.len() as u64).then_some((log, params))
}

pub struct CellOutcome {
    pub log: RunLog,
    pub final_params: PolicyValueParams,
}

/// Train one cell for `total_rounds` rounds. With `out` set, checkpoints
/// and the log are written after every round and an interrupted cell
/// resumes from its last completed round.
pub fn run_cell(
    cfg: &ExperimentConfig,
    name: StrategyName,
    seed: u64,
    paired: Option<&[usize]>,
    out: Option<&Path>,
) -> Result<CellOutcome> {
    let mut env = cfg.env.make();
    let paths = out.map(|root| CellPaths::new(root, name, seed));
    let (mut log, mut params) = match paths.as_ref().and_then(|p| resume_state(p, name.as_str(), seed)) {
        Some(state) => {
            log::info!("{name:?} seed {seed}: resuming after round {}", state.0.rows.len());
            state
        }
        None => {
            let p = initial_params(env.as_ref(), seed);
            if let Some(paths) = &paths {
                save_params(&paths.checkpoint(0), &p)?;
            }
            (RunLog::new(name.as_str(), seed), p)
        }
    };
    let total = cfg.ppo.total_rounds;
    if log.rows.len() > total {
        log.rows.truncate(total);
        params = match &paths {
            Some(p) => load_params(&p.checkpoint(total as u64))?,
            None => params,
        };
    }
    let mut ctx = RoundContext {
        env: env.as_mut(),
        ppo: &cfg.ppo,
        strategy: cfg.strategy(name),
        seed,
        eval_episodes: cfg.eval_episodes,
        clock: cfg.clock,
        min_visits: cfg.min_visits,
    };
    while log.rows.len() < total {
        let k = params.round;
        let paired_count = paired.and_then(|c| c.get(k as usize).copied());
        let out = run_round(&mut ctx, &params, paired_count)?;
        params = out.params;
        log.rows.push(out.row);
        if let Some(paths) = &paths {
            if let (true, Some(report)) = (cfg.save_reports, &out.report) {
                write_atomic(&paths.report(k), report.to_json().as_bytes())?;
            }
            save_params(&paths.checkpoint(params.round), &params)?;
            write_atomic(&paths.runlog(), log.to_csv().as_bytes())?;
        }
        log::debug!("{name:?} seed {seed} round {}: return {:.3}", k + 1, log.rows.last().map_or(0.0, |r| r.test_return));
    }
    Ok(CellOutcome {
        log,
        final_params: params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub strategy: StrategyName,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub rounds_completed: usize,
    pub final_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub config: String,
    pub provenance: BTreeMap<String, Source>,
    pub cells: Vec<CellStatus>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.ok)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().map_or(false, |n| n != "manifest.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash every file under `root` (except the manifest itself).
pub fn file_entries(root: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    if root.exists() {
        collect_files(root, root, &mut files)?;
    }
    let mut entries = files
        .iter()
        .map(|p| {
            Ok(FileEntry {
                path: p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

pub fn write_manifest(cfg: &ExperimentConfig, cells: Vec<CellStatus>) -> Result<Manifest> {
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.config_hash(),
        config: cfg.to_config_text(),
        provenance: cfg.provenance.clone(),
        cells,
        files: file_entries(&cfg.output_dir)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(&cfg.output_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

fn status_of(name: StrategyName, seed: u64, r: &Result<CellOutcome>) -> CellStatus {
    match r {
        Ok(o) => CellStatus {
            strategy: name,
            seed,
            ok: true,
            error: None,
            rounds_completed: o.log.rows.len(),
            final_return: o.log.final_return(),
        },
        Err(e) => CellStatus {
            strategy: name,
            seed,
            ok: false,
            error: Some(e.to_string()),
            rounds_completed: 0,
            final_return: None,
        },
    }
}

/// Run every `(strategy, seed)` cell, writing artifacts under
/// `cfg.output_dir`. Random-baseline cells run after the filtered cells so
/// they can copy the per-round drop counts of the same seed. A failing
/// cell is recorded in the manifest and the others still run.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join("config.txt"), cfg.to_config_text().as_bytes())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut first: Vec<(StrategyName, u64)> = Vec::new();
    let mut second: Vec<(StrategyName, u64)> = Vec::new();
    for &name in &cfg.strategies {
        for &seed in &cfg.seeds {
            if name == StrategyName::Random {
                second.push((name, seed));
            } else {
                first.push((name, seed));
            }
        }
    }
    let root = cfg.output_dir.as_path();
    let results: Vec<(StrategyName, u64, Result<CellOutcome>)> = pool.install(|| {
        first
            .par_iter()
            .map(|&(name, seed)| (name, seed, run_cell(cfg, name, seed, None, Some(root))))
            .collect()
    });
    let paired_counts = |seed: u64| -> Option<Vec<usize>> {
        if !cfg.random_pairing {
            return None;
        }
        results.iter().find_map(|(name, s, r)| match (name, r) {
            (StrategyName::Iif, Ok(o)) if *s == seed => Some(o.log.rows.iter().map(|r| r.n_filtered).collect()),
            _ => None,
        })
    };
    let paired: Vec<Option<Vec<usize>>> = second.iter().map(|&(_, seed)| paired_counts(seed)).collect();
    let random_results: Vec<(StrategyName, u64, Result<CellOutcome>)> = pool.install(|| {
        second
            .par_iter()
            .zip(&paired)
            .map(|(&(name, seed), counts)| (name, seed, run_cell(cfg, name, seed, counts.as_deref(), Some(root))))
            .collect()
    });

    let mut cells: Vec<CellStatus> = results
        .iter()
        .chain(&random_results)
        .map(|(n, s, r)| {
            if let Err(e) = r {
                log::error!("cell {} seed {s} failed: {e}", n.as_str());
            }
            status_of(*n, *s, r)
        })
        .collect();
    let order = |n: StrategyName| cfg.strategies.iter().position(|&x| x == n).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (order(c.strategy), c.seed));
    write_manifest(cfg, cells)
}

/// Parameters of the standard run for `seed` at `round`, read from the
/// output directory when saved there, otherwise recomputed by training.
pub fn load_or_train(cfg: &ExperimentConfig, seed: u64, round: u64) -> Result<PolicyValueParams> {
    let paths = CellPaths::new(&cfg.output_dir, StrategyName::Standard, seed);
    if let Ok(p) = load_params(&paths.checkpoint(round)) {
        return Ok(p);
    }
    let mut env = cfg.env.make();
    let mut params = initial_params(env.as_ref(), seed);
    let mut ctx = RoundContext {
        env: env.as_mut(),
        ppo: &cfg.ppo,
        strategy: FilterStrategy::Standard,
        seed,
        eval_episodes: 1,
        clock: Clock::Work,
        min_visits: cfg.min_visits,
    };
    // Only the parameters matter here; evaluation draws from its own
    // stream, so skipping most of it leaves training unchanged.
    while params.round < round {
        params = run_round(&mut ctx, &params, None)?.params;
    }
    Ok(params)
}

/// Attribution target selector for the `attribute` driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetChoice {
    Return,
    /// Action target at the state and action of this buffer record.
    Action { record: usize },
}

/// Influence of round `round`'s records of the standard run for `seed`.
pub fn attribute_round(
    cfg: &ExperimentConfig,
    seed: u64,
    round: u64,
    target: TargetChoice,
    mode: InfluenceMode,
) -> Result<InfluenceReport> {
    let params = load_or_train(cfg, seed, round)?;
    let mut env = cfg.env.make();
    let buffer = collect_rollout(env.as_mut(), &params, &cfg.ppo, &mut stream(seed, labels::COLLECT, round))?;
    let target_fn = match target {
        TargetChoice::Return => TargetFunction::Return { validation: &buffer },
        TargetChoice::Action { record } => {
            let r = buffer.records.get(record).ok_or(Error::ShapeMismatch {
                expected: buffer.len(),
                got: record,
            })?;
            TargetFunction::Action {
                obs: &r.obs,
                action: r.action,
            }
        }
    };
    let coefs = ObjectiveCoefs::from(&cfg.ppo);
    match mode {
        InfluenceMode::SingleCheckpoint => influence_single_checkpoint(&params, &buffer, target_fn, coefs, DotMethod::Ghost),
        InfluenceMode::FullTracIn => {
            let options = UpdateOptions {
                sampling: Sampling::Shuffle,
                keep_checkpoints: true,
            };
            let (_, trace) = ppo_update(&params, &buffer, &cfg.ppo, &mut stream(seed, labels::SHUFFLE, round), &options)?;
            influence_full_tracin(&trace, &buffer, target_fn, coefs)
        }
    }
}

pub fn attribution_path(cfg: &ExperimentConfig, seed: u64, round: u64, target: TargetKind, mode: InfluenceMode) -> PathBuf {
    let target = match target {
        TargetKind::Action => "action",
        TargetKind::Return => "return",
    };
    let mode = match mode {
        InfluenceMode::FullTracIn => "full",
        InfluenceMode::SingleCheckpoint => "fast",
    };
    cfg.output_dir
        .join("attribution")
        .join(format!("seed_{seed}"))
        .join(format!("round_{round:04}_{target}_{mode}.json"))
}

pub fn save_report(path: &Path, report: &InfluenceReport) -> Result<()> {
    write_atomic(path, report.to_json().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessRow {
    pub round: u64,
    pub u: usize,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub sigma: f64,
    pub roughness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOutput {
    pub mismatch_csv: PathBuf,
    pub roughness_csv: PathBuf,
    pub intervention_csv: PathBuf,
    pub spearman: Option<f64>,
    pub roughness: Vec<RoughnessRow>,
    pub interventions: Vec<(u64, InterventionOutcome)>,
}

/// Diagnostics of the standard run for `seed`: sign-mismatch table at
/// round `to` (full TracIn, return target, exact advantage oracle; skipped
/// on non-tabular environments), roughness
/// of rounds `from..=to` under each neighbour count in `us`, and both
/// intervention kinds at the same rounds.
pub fn diagnose(cfg: &ExperimentConfig, seed: u64, from: u64, to: u64, us: &[usize]) -> Result<DiagnoseOutput> {
    let dir = cfg.output_dir.join("diagnostics").join(format!("seed_{seed}"));
    let final_params = load_or_train(cfg, seed, cfg.ppo.total_rounds as u64)?;
    let env = cfg.env.make();

    let mut mismatch_text = String::new();
    let mut spearman_value = None;
    let mut roughness_rows = Vec::new();
    let mut interventions = Vec::new();
    for round in from..=to {
        let params = load_or_train(cfg, seed, round)?;
        let mut e = cfg.env.make();
        let buffer = collect_rollout(e.as_mut(), &params, &cfg.ppo, &mut stream(seed, labels::COLLECT, round))?;
        let report = attribute_round(cfg, seed, round, TargetChoice::Return, InfluenceMode::FullTracIn)?;
        if round == to {
            match exact_advantage(env.as_ref(), &params, cfg.ppo.gamma) {
                Ok(table) => {
                    let analysis = mismatch_analysis(&buffer, &report, &table.for_buffer(&buffer))?;
                    let ranks: Vec<f64> = analysis.rows.iter().map(|r| r.rank as f64).collect();
                    let products: Vec<f64> = analysis.rows.iter().map(|r| r.product).collect();
                    spearman_value = crate::diagnostics::spearman(&ranks, &products).ok();
                    mismatch_text = analysis.to_csv();
                }
                Err(Error::OracleUnavailable(why)) => {
                    log::warn!("no advantage oracle for {}: {why}", cfg.env);
                }
                Err(e) => return Err(e),
            }
        }
        for &u in us {
            match build_similarity_graph(&buffer, &report, &final_params, u) {
                Ok(g) => roughness_rows.push(RoughnessRow {
                    round,
                    u,
                    n_nodes: g.node_ids.len(),
                    n_edges: g.edges.len(),
                    sigma: g.sigma,
                    roughness: roughness(&g)?,
                }),
                Err(Error::TooFewPositive(n)) => log::warn!("round {round}: only {n} positive records, no graph"),
                Err(e) => return Err(e),
            }
        }
        for kind in [InterventionKind::Influence, InterventionKind::Random] {
            let mut e = cfg.env.make();
            let o = single_round_intervention(e.as_mut(), &params, &cfg.ppo, seed, cfg.filter_p(), kind, cfg.eval_episodes)?;
            interventions.push((seed, o));
        }
    }

    let mismatch_csv = dir.join(format!("mismatch_round_{to:04}.csv"));
    write_atomic(&mismatch_csv, mismatch_text.as_bytes())?;
    let mut rough = String::from("round,u,n_nodes,n_edges,sigma,roughness\n");
    for r in &roughness_rows {
        rough.push_str(&format!("{},{},{},{},{:?},{:?}\n", r.round, r.u, r.n_nodes, r.n_edges, r.sigma, r.roughness));
    }
    let roughness_csv = dir.join("roughness.csv");
    write_atomic(&roughness_csv, rough.as_bytes())?;
    let intervention_path = dir.join("intervention.csv");
    write_atomic(&intervention_path, intervention_csv(&interventions).as_bytes())?;
    Ok(DiagnoseOutput {
        mismatch_csv,
        roughness_csv,
        intervention_csv: intervention_path,
        spearman: spearman_value,
        roughness: roughness_rows,
        interventions,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub half_width: Option<f64>,
}

/// Read every `<strategy>/seed_<s>/runlog.csv` under `root`.
pub fn load_logs(root: &Path) -> Result<BTreeMap<String, BTreeMap<u64, RunLog>>> {
    let mut out: BTreeMap<String, BTreeMap<u64, RunLog>> = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let sdir = entry?.path();
        let Some(strategy) = sdir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        if !sdir.is_dir() || strategy.parse::<StrategyName>().is_err() {
            continue;
        }
        for seed_entry in fs::read_dir(&sdir)? {
            let dir = seed_entry?.path();
            let seed = dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed_"))
                .and_then(|s| s.parse::<u64>().ok());
            let (Some(seed), true) = (seed, dir.join("runlog.csv").exists()) else {
                continue;
            };
            let text = fs::read_to_string(dir.join("runlog.csv"))?;
            out.entry(strategy.clone())
                .or_default()
                .insert(seed, RunLog::from_csv(strategy.clone(), seed, &text)?);
        }
    }
    Ok(out)
}

fn summarize(strategy: &str, metric: &str, values: &[f64]) -> Option<SummaryRow> {
    if values.is_empty() {
        return None;
    }
    let stats = seed_stats(values).ok();
    Some(SummaryRow {
        strategy: strategy.to_string(),
        metric: metric.to_string(),
        n: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        std: stats.map(|s| s.std),
        half_width: stats.map(|s| s.half_width),
    })
}

/// Final returns of every strategy, and SE_ave, SE_peak and RT_peak of
/// every non-standard strategy against the standard run of the same seed.
pub fn summary(logs: &BTreeMap<String, BTreeMap<u64, RunLog>>) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let standard = logs.get(StrategyName::Standard.as_str());
    for (strategy, by_seed) in logs {
        let finals: Vec<f64> = by_seed.values().filter_map(RunLog::final_return).collect();
        rows.extend(summarize(strategy, "final_return", &finals));
        if strategy == StrategyName::Standard.as_str() {
            continue;
        }
        let Some(standard) = standard else { continue };
        let (mut se_ave, mut se_peak, mut rt) = (Vec::new(), Vec::new(), Vec::new());
        for (seed, log) in by_seed {
            if let Some(base) = standard.get(seed) {
                let se = se_metrics(base, log)?;
                se_ave.push(se.se_ave);
                se_peak.push(se.se_peak);
                if let Ok(r) = rt_peak(base, log) {
                    rt.push(r);
                }
            }
        }
        rows.extend(summarize(strategy, "se_ave", &se_ave));
        rows.extend(summarize(strategy, "se_peak", &se_peak));
        rows.extend(summarize(strategy, "rt_peak", &rt));
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:?}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("strategy,metric,n,mean,std,half_width\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{},{}\n",
            r.strategy,
            r.metric,
            r.n,
            r.mean,
            opt(r.std),
            opt(r.half_width)
        ));
    }
    out
}

pub fn summary_text(env: EnvId, rows: &[SummaryRow]) -> String {
    let mut out = format!("{env}\n{:<10} {:<13} {:>3} {:>18}\n", "strategy", "metric", "n", "mean ± 95% CI");
    for r in rows {
        let pct = r.metric != "final_return";
        let (m, h) = (r.mean, r.half_width);
        let unit = if pct { "%" } else { "" };
        let value = match h {
            Some(h) => format!("{m:.3}{unit} ± {h:.3}{unit}"),
            None => format!("{m:.3}{unit}"),
        };
        out.push_str(&format!("{:<10} {:<13} {:>3} {:>18}\n", r.strategy, r.metric, r.n, value));
    }
    out
}

/// Write `summary.csv` and `summary.txt` under the output directory.
pub fn write_report(cfg: &ExperimentConfig) -> Result<(Vec<SummaryRow>, String)> {
    let rows = summary(&load_logs(&cfg.output_dir)?)?;
    let text = summary_text(cfg.env, &rows);
    write_atomic(&cfg.output_dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    write_atomic(&cfg.output_dir.join("summary.txt"), text.as_bytes())?;
    Ok((rows, text))
}
