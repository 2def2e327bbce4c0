//! Multi-run experiments: the replay-coefficient sweep and the paired mode
//! comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::env::Tier;
use crate::error::{RrlError, Result};
use crate::trainer::{train_run, RunSummary};

pub const DEFAULT_BETAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Final evaluation of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub replay_beta: f64,
    pub output_dir: PathBuf,
    pub solve_rate: BTreeMap<Tier, f64>,
    pub solve_rate_overall: f64,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub initial_ppl_variance: f64,
    pub final_ppl_variance: f64,
}

impl RunResult {
    fn from_summary(config: &RunConfig, s: &RunSummary) -> Self {
        let f = &s.last_eval;
        let i = &s.first_eval;
        Self {
            mode: config.mode,
            seed: config.seed,
            replay_beta: config.replay_beta,
            output_dir: s.output_dir.clone(),
            solve_rate: f.solve_rate.clone().unwrap_or_default(),
            solve_rate_overall: f.solve_rate_overall.unwrap_or_default(),
            initial_entropy: i.mean_policy_entropy.unwrap_or_default(),
            final_entropy: f.mean_policy_entropy.unwrap_or_default(),
            initial_ppl_variance: i.ppl_variance.map(|p| p.mean).unwrap_or_default(),
            final_ppl_variance: f.ppl_variance.map(|p| p.mean).unwrap_or_default(),
        }
    }
}

fn run_all(configs: &[RunConfig], parallel: bool) -> Result<Vec<RunResult>> {
    let one = |c: &RunConfig| train_run(c).map(|s| RunResult::from_summary(c, &s));
    if parallel {
        configs.par_iter().map(one).collect()
    } else {
        configs.iter().map(one).collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
    pub p_value: f64,
}

/// Paired one-sided sign test of `a > b`; ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len().min(b.len()) - wins - losses;
    let n = wins + losses;
    let p_value = if n == 0 {
        1.0
    } else {
        (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / 2f64.powi(n as i32)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub replay_beta: f64,
    pub runs: usize,
    pub mean_solve_rate: BTreeMap<Tier, f64>,
    pub mean_overall: f64,
    pub std_overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunResult>,
}

fn seeds(base: &RunConfig, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.seed + i).collect()
}

fn mean_rates(results: &[&RunResult]) -> BTreeMap<Tier, f64> {
    let mut sums: BTreeMap<Tier, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (t, v) in &r.solve_rate {
            sums.entry(*t).or_default().push(*v);
        }
    }
    sums.into_iter().map(|(t, v)| (t, mean_std(&v).0)).collect()
}

/// Runs every beta for `seed_count` consecutive seeds under `base`. Each run
/// writes to `<output_dir>/beta_<b>/seed_<s>`.
pub fn run_sweep(base: &RunConfig, betas: &[f64], seed_count: usize, parallel: bool) -> Result<SweepReport> {
    if betas.is_empty() || seed_count == 0 {
        return Err(RrlError::InvalidArgument("sweep needs at least one beta and one seed".into()));
    }
    let mut configs = Vec::new();
    for &beta in betas {
        for seed in seeds(base, seed_count) {
            let mut c = base.clone();
            c.replay_beta = beta;
            c.seed = seed;
            c.output_dir = base.output_dir.join(format!("beta_{beta}")).join(format!("seed_{seed}"));
            c.validate()?;
            configs.push(c);
        }
    }
    let runs = run_all(&configs, parallel)?;
    let rows = betas
        .iter()
        .map(|&beta| {
            let group: Vec<&RunResult> = runs.iter().filter(|r| r.replay_beta == beta).collect();
            let overall: Vec<f64> = group.iter().map(|r| r.solve_rate_overall).collect();
            let (mean_overall, std_overall) = mean_std(&overall);
            SweepRow {
                replay_beta: beta,
                runs: group.len(),
                mean_solve_rate: mean_rates(&group),
                mean_overall,
                std_overall,
            }
        })
        .collect();
    Ok(SweepReport { rows, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub runs: usize,
    /// (mean, std) of the final greedy solve rate per tier.
    pub solve_rate: BTreeMap<Tier, (f64, f64)>,
    pub overall: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<ModeRow>,
    /// rrl against vanilla_ppo on the overall final solve rate, paired by seed.
    pub sign_test: SignTest,
    pub mean_improvement: f64,
    pub runs: Vec<RunResult>,
}

/// Runs all four modes for `seed_count` consecutive seeds. Runs with the same
/// seed share problem sets and initial parameters. Each run writes to
/// `<output_dir>/seed_<s>/<mode>`.
pub fn run_compare(base: &RunConfig, seed_count: usize, parallel: bool) -> Result<CompareReport> {
    if seed_count == 0 {
        return Err(RrlError::InvalidArgument("compare needs at least one seed".into()));
    }
    let mut configs = Vec::new();
    for seed in seeds(base, seed_count) {
        for mode in Mode::ALL {
            let mut c = base.clone();
            c.mode = mode;
            c.seed = seed;
            c.output_dir = base.output_dir.join(format!("seed_{seed}")).join(mode.as_str());
            c.validate()?;
            configs.push(c);
        }
    }
    let runs = run_all(&configs, parallel)?;
    let rows = Mode::ALL
        .iter()
        .map(|&mode| {
            let group: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
            let mut per_tier: BTreeMap<Tier, Vec<f64>> = BTreeMap::new();
            for r in &group {
                for (t, v) in &r.solve_rate {
                    per_tier.entry(*t).or_default().push(*v);
                }
            }
            let overall: Vec<f64> = group.iter().map(|r| r.solve_rate_overall).collect();
            ModeRow {
                mode,
                runs: group.len(),
                solve_rate: per_tier.into_iter().map(|(t, v)| (t, mean_std(&v))).collect(),
                overall: mean_std(&overall),
            }
        })
        .collect();
    let overall_of = |mode: Mode| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.solve_rate_overall)
            .collect()
    };
    let rrl = overall_of(Mode::Rrl);
    let vanilla = overall_of(Mode::VanillaPpo);
    let diffs: Vec<f64> = rrl.iter().zip(&vanilla).map(|(a, b)| a - b).collect();
    Ok(CompareReport {
        rows,
        sign_test: sign_test(&rrl, &vanilla),
        mean_improvement: mean_std(&diffs).0,
        runs,
    })
}

pub fn format_sweep_table(report: &SweepReport) -> String {
    let mut out = String::from("beta    runs  overall (mean ± std)  per tier\n");
    for r in &report.rows {
        let tiers: Vec<String> = r.mean_solve_rate.iter().map(|(t, v)| format!("{t}={v:.3}")).collect();
        let _ = writeln!(
            out,
            "{:<7} {:<5} {:.3} ± {:.3}         {}",
            r.replay_beta,
            r.runs,
            r.mean_overall,
            r.std_overall,
            tiers.join(" ")
        );
    }
    out
}

pub fn format_compare_table(report: &CompareReport) -> String {
    let mut out = String::from("mode         runs  overall (mean ± std)  per tier\n");
    for r in &report.rows {
        let tiers: Vec<String> = r
            .solve_rate
            .iter()
            .map(|(t, (m, s))| format!("{t}={m:.3}±{s:.3}"))
            .collect();
        let _ = writeln!(
            out,
            "{:<12} {:<5} {:.3} ± {:.3}         {}",
            r.mode.as_str(),
            r.runs,
            r.overall.0,
            r.overall.1,
            tiers.join(" ")
        );
    }
    let s = &report.sign_test;
    let _ = writeln!(
        out,
        "sign test rrl > vanilla_ppo: wins={} losses={} ties={} p={:.4}; mean improvement {:+.2} pp",
        s.wins,
        s.losses,
        s.ties,
        s.p_value,
        100.0 * report.mean_improvement
    );
    out
}

pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| RrlError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["replay_beta", "runs", "solve_easy", "solve_medium", "solve_hard", "overall_mean", "overall_std"])
        .map_err(csv_err)?;
    for r in &report.rows {
        let t = |tier| r.mean_solve_rate.get(&tier).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.replay_beta.to_string(),
            r.runs.to_string(),
            t(Tier::Easy),
            t(Tier::Medium),
            t(Tier::Hard),
            r.mean_overall.to_string(),
            r.std_overall.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}

pub fn write_compare_csv(report: &CompareReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| RrlError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "mode",
        "runs",
        "easy_mean",
        "easy_std",
        "medium_mean",
        "medium_std",
        "hard_mean",
        "hard_std",
        "overall_mean",
        "overall_std",
    ])
    .map_err(csv_err)?;
    for r in &report.rows {
        let t = |tier| {
            r.solve_rate
                .get(&tier)
                .map(|(m, s)| [m.to_string(), s.to_string()])
                .unwrap_or_default()
        };
        let [em, es] = t(Tier::Easy);
        let [mm, ms] = t(Tier::Medium);
        let [hm, hs] = t(Tier::Hard);
        w.write_record([
            r.mode.as_str().to_string(),
            r.runs.to_string(),
            em,
            es,
            mm,
            ms,
            hm,
            hs,
            r.overall.0.to_string(),
            r.overall.1.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}
