//! Per-round run logs, sample-efficiency and runtime reductions, and
//! seed-level summary statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,test_return,n_filtered,wall_ms_collect,wall_ms_influence,wall_ms_optimize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    /// 1-based: the test return after the `round`-th update.
    pub round: usize,
    pub test_return: f64,
    pub n_filtered: usize,
    pub wall_ms_collect: f64,
    pub wall_ms_influence: f64,
    pub wall_ms_optimize: f64,
}

impl RoundRow {
    pub fn total_ms(&self) -> f64 {
        self.wall_ms_collect + self.wall_ms_influence + self.wall_ms_optimize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: String,
    pub seed: u64,
    pub rows: Vec<RoundRow>,
}

impl RunLog {
    pub fn new(label: impl Into<String>, seed: u64) -> Self {
        RunLog {
            label: label.into(),
            seed,
            rows: Vec::new(),
        }
    }

    /// Build a log from bare returns (no timings or filter counts).
    pub fn from_returns(label: impl Into<String>, returns: &[f64]) -> Self {
        let mut log = RunLog::new(label, 0);
        for (i, &r) in returns.iter().enumerate() {
            log.rows.push(RoundRow {
                round: i + 1,
                test_return: r,
                n_filtered: 0,
                wall_ms_collect: 0.0,
                wall_ms_influence: 0.0,
                wall_ms_optimize: 0.0,
            });
        }
        log
    }

    pub fn returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.test_return).collect()
    }

    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_return)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            // `{:?}` on f64 prints the shortest string that round-trips.
            out.push_str(&format!(
                "{},{:?},{},{:?},{:?},{:?}\n",
                r.round, r.test_return, r.n_filtered, r.wall_ms_collect, r.wall_ms_influence, r.wall_ms_optimize
            ));
        }
        out
    }

    pub fn from_csv(label: impl Into<String>, seed: u64, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => return Err(Error::Config(format!("unexpected run log header: {other:?}"))),
        }
        let mut log = RunLog::new(label, seed);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Config(format!("run log line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            let num = |j: usize, what: &str| f[j].trim().parse::<f64>().map_err(|_| bad(what));
            let row = RoundRow {
                round: f[0].trim().parse().map_err(|_| bad("round"))?,
                test_return: num(1, "test_return")?,
                n_filtered: f[2].trim().parse().map_err(|_| bad("n_filtered"))?,
                wall_ms_collect: num(3, "wall_ms_collect")?,
                wall_ms_influence: num(4, "wall_ms_influence")?,
                wall_ms_optimize: num(5, "wall_ms_optimize")?,
            };
            if row.round != log.rows.len() + 1 {
                return Err(bad("round numbering"));
            }
            log.rows.push(row);
        }
        Ok(log)
    }
}

/// Earliest round whose test return is at least `v`.
pub fn first_round_reaching(log: &RunLog, v: f64) -> Option<usize> {
    log.rows.iter().find(|r| r.test_return >= v).map(|r| r.round)
}

/// Distinct running-maximum values of a log, in the order they appear.
pub fn running_max_levels(log: &RunLog) -> Vec<f64> {
    let mut levels: Vec<f64> = Vec::new();
    for r in &log.rows {
        if levels.last().map_or(true, |&m| r.test_return > m) {
            levels.push(r.test_return);
        }
    }
    levels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeMetrics {
    /// Mean percentage round reduction over the standard log's milestones.
    pub se_ave: f64,
    /// Percentage round reduction at the standard log's peak.
    pub se_peak: f64,
}

/// Round reductions of `iif` relative to `std`. Milestones are the
/// standard log's distinct running maxima; a milestone the filtered run
/// never reaches counts as reached at `total_rounds + 1`, where
/// `total_rounds` is the longer of the two logs.
pub fn se_metrics(std_log: &RunLog, iif_log: &RunLog) -> Result<SeMetrics> {
    if std_log.rows.is_empty() || iif_log.rows.is_empty() {
        return Err(Error::NoRecords);
    }
    let total = std_log.rows.len().max(iif_log.rows.len());
    let levels = running_max_levels(std_log);
    let reduction = |v: f64| {
        let m_std = first_round_reaching(std_log, v).expect("level reached by construction") as f64;
        let m_iif = first_round_reaching(iif_log, v).unwrap_or(total + 1) as f64;
        (1.0 - m_iif / m_std) * 100.0
    };
    let se_ave = levels.iter().map(|&v| reduction(v)).sum::<f64>() / levels.len() as f64;
    let se_peak = reduction(*levels.last().expect("nonempty log"));
    Ok(SeMetrics { se_ave, se_peak })
}

fn cumulative_ms(log: &RunLog, through_round: usize) -> f64 {
    log.rows.iter().take(through_round).map(RoundRow::total_ms).sum()
}

/// Percentage reduction of cumulative (collect + influence + optimize)
/// time needed to reach the standard log's peak. If the filtered run never
/// reaches it, its whole cumulative time is used.
pub fn rt_peak(std_log: &RunLog, iif_log: &RunLog) -> Result<f64> {
    if std_log.rows.is_empty() || iif_log.rows.is_empty() {
        return Err(Error::NoRecords);
    }
    let peak = *running_max_levels(std_log).last().expect("nonempty log");
    let m_std = first_round_reaching(std_log, peak).expect("peak reached");
    let m_iif = first_round_reaching(iif_log, peak).unwrap_or(iif_log.rows.len());
    let denom = cumulative_ms(std_log, m_std);
    if denom <= 0.0 {
        return Err(Error::DegenerateInput("standard run has zero cumulative time at its peak".into()));
    }
    Ok((1.0 - cumulative_ms(iif_log, m_iif) / denom) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Two-sided 95% t quantile with n − 1 degrees of freedom, as printed
    /// in t tables (three decimals).
    pub t_multiplier: f64,
    pub half_width: f64,
}

pub fn t_multiplier(df: usize) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df as f64).expect("df ≥ 1");
    (t.inverse_cdf(0.975) * 1000.0).round() / 1000.0
}

pub fn seed_stats(values: &[f64]) -> Result<SeedStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewSeeds(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = t_multiplier(n - 1);
    Ok(SeedStats {
        n,
        mean,
        std,
        t_multiplier: t,
        half_width: t * std / (n as f64).sqrt(),
    })
}
