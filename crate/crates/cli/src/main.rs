use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use rlattr::attribution::InfluenceMode;
use rlattr::diagnostics::{intervention_csv, single_round_intervention, InterventionKind};
use rlattr::experiment::{
    attribute_round, attribution_path, diagnose, load_or_train, parse_config, run_matrix, save_report, write_report,
    ExperimentConfig, Manifest, TargetChoice,
};

#[derive(Parser, Debug)]
#[command(name = "rlattr", version, about = "PPO with per-record influence attribution and influence-based filtering")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// frozenlake, emptygrid, chain or chain:N.
    #[arg(long, global = true)]
    env: Option<String>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed count N (seeds 0..N), a list `0,3,4` or a range `2..5`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output root; defaults to $IIF_OUTPUT_DIR, then ./runs.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    eval_episodes: Option<usize>,
    /// work (deterministic pass counts) or wall (milliseconds).
    #[arg(long, global = true)]
    clock: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Any configuration key, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train standard PPO.
    Train,
    /// Train with iterative influence-based filtering.
    Iif {
        /// Fraction of negative-influence records dropped per round.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Influence scores of one round's records.
    Attribute {
        #[arg(long)]
        round: u64,
        #[arg(long, value_enum, default_value_t = TargetArg::Return)]
        target: TargetArg,
        /// Record whose state and action define the action target.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Fast)]
        mode: ModeArg,
    },
    /// Retrain a round with and without its harmful records.
    Intervene {
        #[arg(long)]
        round: u64,
        /// Last round (inclusive) when sweeping a range.
        #[arg(long)]
        to: Option<u64>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Mismatch, roughness and intervention tables.
    Diagnose {
        #[arg(long)]
        round: u64,
        /// First round of the roughness and intervention sweep.
        #[arg(long)]
        from: Option<u64>,
        /// Neighbour counts for the similarity graph.
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        u: Vec<usize>,
    },
    /// Run a strategy-by-seed matrix and summarize it.
    Bench {
        /// Comma list of standard, iif, random, adv1, adv2, td, reward.
        #[arg(long, default_value = "iif,random")]
        strategies: String,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Summarize the run logs under the output directory.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TargetArg {
    Return,
    Action,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Fast,
    Full,
}

impl Common {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(v) = &self.env {
            push("env", v.clone());
        }
        if let Some(v) = self.rounds {
            push("rounds", v.to_string());
        }
        if let Some(v) = self.seed {
            push("seeds", v.to_string());
        }
        if let Some(v) = &self.seeds {
            let v = match v.parse::<u64>() {
                Ok(n) => format!("0..{n}"),
                Err(_) => v.clone(),
            };
            push("seeds", v);
        }
        if let Some(v) = &self.output_dir {
            push("output_dir", v.display().to_string());
        }
        if let Some(v) = self.eval_episodes {
            push("eval_episodes", v.to_string());
        }
        if let Some(v) = &self.clock {
            push("clock", v.clone());
        }
        if let Some(v) = self.workers {
            push("workers", v.to_string());
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            push(k.trim(), v.trim().to_string());
        }
        Ok(out)
    }
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    let mut flags = common.flag_pairs()?;
    // Subcommand settings go last so they win over generic --set values.
    flags.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let cfg = parse_config(text.as_deref(), &flags)?;
    info!("resolved configuration:\n{}provenance:\n{}", cfg.to_config_text(), cfg.provenance_text());
    Ok(cfg)
}

fn finish_matrix(manifest: &Manifest) -> Result<()> {
    for c in &manifest.cells {
        match (&c.error, c.final_return) {
            (Some(e), _) => eprintln!("{} seed {}: FAILED: {e}", c.strategy.as_str(), c.seed),
            (None, Some(r)) => println!("{} seed {}: {} rounds, final return {r:.4}", c.strategy.as_str(), c.seed, c.rounds_completed),
            (None, None) => println!("{} seed {}: no rounds", c.strategy.as_str(), c.seed),
        }
    }
    if !manifest.all_ok() {
        bail!("{} of {} cells failed", manifest.cells.iter().filter(|c| !c.ok).count(), manifest.cells.len());
    }
    Ok(())
}

fn only_seed(cfg: &ExperimentConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => bail!("this command takes a single --seed"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Train => {
            let cfg = load_config(common, &[("strategies", "standard".into())])?;
            finish_matrix(&run_matrix(&cfg)?)
        }
        Command::Iif { p } => {
            let mut extra = vec![("strategies", "iif".to_string())];
            if let Some(p) = p {
                extra.push(("p", p.to_string()));
            }
            let cfg = load_config(common, &extra)?;
            finish_matrix(&run_matrix(&cfg)?)
        }
        Command::Attribute {
            round,
            target,
            record,
            mode,
        } => {
            let cfg = load_config(common, &[])?;
            let seed = only_seed(&cfg)?;
            let target = match target {
                TargetArg::Return => TargetChoice::Return,
                TargetArg::Action => TargetChoice::Action { record },
            };
            let mode = match mode {
                ModeArg::Fast => InfluenceMode::SingleCheckpoint,
                ModeArg::Full => InfluenceMode::FullTracIn,
            };
            let report = attribute_round(&cfg, seed, round, target, mode)?;
            let path = attribution_path(&cfg, seed, round, report.target, mode);
            save_report(&path, &report)?;
            let negative = report.scores.iter().filter(|&&s| s < 0.0).count();
            println!(
                "round {round}: {} records, {negative} negative, target gradient norm {:.6e}; wrote {}",
                report.scores.len(),
                report.target_grad_norm,
                path.display()
            );
            Ok(())
        }
        Command::Intervene { round, to, p } => {
            let mut extra = Vec::new();
            if let Some(p) = p {
                extra.push(("p", p.to_string()));
            }
            let cfg = load_config(common, &extra)?;
            let seed = only_seed(&cfg)?;
            let mut rows = Vec::new();
            for k in round..=to.unwrap_or(round) {
                let params = load_or_train(&cfg, seed, k)?;
                for kind in [InterventionKind::Influence, InterventionKind::Random] {
                    let mut env = cfg.env.make();
                    let o = single_round_intervention(env.as_mut(), &params, &cfg.ppo, seed, cfg.filter_p(), kind, cfg.eval_episodes)?;
                    println!("round {k} {kind:?}: removed {}, delta return {:+.4}", o.n_removed, o.delta);
                    rows.push((seed, o));
                }
            }
            let path = cfg.output_dir.join("intervention").join(format!("seed_{seed}.csv"));
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            std::fs::write(&path, intervention_csv(&rows))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Diagnose { round, from, u } => {
            let cfg = load_config(common, &[])?;
            let seed = only_seed(&cfg)?;
            let out = diagnose(&cfg, seed, from.unwrap_or(round), round, &u)?;
            if let Some(rho) = out.spearman {
                println!("spearman(influence rank, oracle advantage x estimate) = {rho:.4}");
            }
            for r in &out.roughness {
                println!("round {} u {}: roughness {:.5} ({} nodes)", r.round, r.u, r.roughness, r.n_nodes);
            }
            for path in [&out.mismatch_csv, &out.roughness_csv, &out.intervention_csv] {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Bench { strategies, p } => {
            let mut names = vec!["standard".to_string()];
            for s in strategies.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if !names.iter().any(|n| n == s) {
                    names.push(s.to_string());
                }
            }
            let mut extra = vec![("strategies", names.join(","))];
            if let Some(p) = p {
                extra.push(("p", p.to_string()));
            }
            let cfg = load_config(common, &extra)?;
            let manifest = run_matrix(&cfg)?;
            let (_, text) = write_report(&cfg)?;
            print!("{text}");
            finish_matrix(&manifest)
        }
        Command::Report => {
            let cfg = load_config(common, &[])?;
            let (rows, text) = write_report(&cfg)?;
            if rows.is_empty() {
                bail!("no run logs under {}", cfg.output_dir.display());
            }
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
