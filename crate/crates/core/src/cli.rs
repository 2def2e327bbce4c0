//! The `rrl` command line.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{parse_override, RunConfig};
use crate::diag::evaluate_solve_rate;
use crate::env::{generate_problems, read_problems, write_problems, EnvKind, Tier};
use crate::error::RrlError;
use crate::experiment::{
    format_compare_table, format_sweep_table, run_compare, run_sweep, write_compare_csv, write_sweep_csv,
    DEFAULT_BETAS,
};
use crate::model::load_params;
use crate::trainer::{train_run_with, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "rrl", version, about = "Replay-based policy-gradient training on toy sequence tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ppo.clip_eps=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy solve rate of saved parameters on a problem file.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        problems: PathBuf,
    },
    /// Train once per replay coefficient.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated replay coefficients.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        parallel: bool,
    },
    /// Train every mode over paired seeds and compare.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        parallel: bool,
    },
    /// Write a problem file.
    GenProblems {
        #[arg(long)]
        env_kind: EnvKind,
        #[arg(long)]
        tier: Tier,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status plus the error that caused it.
#[derive(Debug)]
pub enum Failure {
    Usage(RrlError),
    Runtime(RrlError),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    /// Single-line JSON description.
    pub fn to_json_line(&self) -> String {
        let (kind, e) = match self {
            Failure::Usage(e) => ("usage", e),
            Failure::Runtime(e) => ("runtime", e),
        };
        json!({ "error": kind, "message": e.to_string().replace('\n', " ") }).to_string()
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut overrides = run
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Usage)?;
    if let Some(seed) = run.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &run.output_dir {
        overrides.push(("output_dir".into(), toml::Value::String(dir.display().to_string()).to_string()));
    }
    match &run.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Usage(RrlError::InvalidArgument(format!(
                    "config file {} does not exist",
                    path.display()
                ))));
            }
            RunConfig::load(path, &overrides).map_err(Failure::Usage)
        }
        None => RunConfig::from_toml_str("", &overrides).map_err(Failure::Usage),
    }
}

fn write_text(path: &std::path::Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(RrlError::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(path: &std::path::Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Runtime(RrlError::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

/// Executes a parsed command, returning what it printed on stdout.
pub fn run_command(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Train { run, resume } => {
            let config = resolve(&run)?;
            let s = train_run_with(&config, &TrainOptions { resume, stop_after: None }).map_err(Failure::Runtime)?;
            Ok(json!({
                "output_dir": s.output_dir,
                "steps_completed": s.steps_completed,
                "solve_rate": s.last_eval.solve_rate,
                "solve_rate_overall": s.last_eval.solve_rate_overall,
            })
            .to_string())
        }
        Command::Eval { params, problems } => {
            if !params.exists() {
                return Err(Failure::Usage(RrlError::InvalidArgument(format!(
                    "checkpoint {} does not exist",
                    params.display()
                ))));
            }
            let (policy, _) = load_params(&params).map_err(Failure::Runtime)?;
            let ps = read_problems(&problems).map_err(Failure::Usage)?;
            let rates = evaluate_solve_rate(&policy, &ps).map_err(Failure::Runtime)?;
            Ok(json!({ "solve_rate": rates.rates(), "overall": rates.overall(), "problems": ps.len() }).to_string())
        }
        Command::Sweep {
            run,
            betas,
            seeds,
            parallel,
        } => {
            let config = resolve(&run)?;
            let betas = betas.unwrap_or_else(|| DEFAULT_BETAS.to_vec());
            if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
                return Err(Failure::Usage(RrlError::config("betas", format!("{b} is outside [0, 1]"))));
            }
            create_dir(&config.output_dir)?;
            let report = run_sweep(&config, &betas, seeds, parallel).map_err(Failure::Runtime)?;
            write_sweep_csv(&report, &config.output_dir.join("sweep.csv")).map_err(Failure::Runtime)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&config.output_dir.join("sweep.json"), &text)?;
            Ok(format_sweep_table(&report))
        }
        Command::Compare { run, seeds, parallel } => {
            let config = resolve(&run)?;
            create_dir(&config.output_dir)?;
            let report = run_compare(&config, seeds, parallel).map_err(Failure::Runtime)?;
            write_compare_csv(&report, &config.output_dir.join("compare.csv")).map_err(Failure::Runtime)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&config.output_dir.join("compare.json"), &text)?;
            Ok(format_compare_table(&report))
        }
        Command::GenProblems {
            env_kind,
            tier,
            count,
            seed,
            out,
        } => {
            let ps = generate_problems(env_kind, tier, count, seed).map_err(Failure::Usage)?;
            write_problems(&out, &ps).map_err(Failure::Runtime)?;
            Ok(json!({ "written": ps.len(), "path": out }).to_string())
        }
    }
}

/// Parses `args` and runs; returns the process exit code. Output goes to
/// stdout, failures to stderr as one JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let f = Failure::Usage(RrlError::InvalidArgument(e.to_string().trim().to_string()));
            eprintln!("{}", f.to_json_line());
            return f.exit_code();
        }
    };
    match run_command(cli) {
        Ok(out) => {
            println!("{}", out.trim_end());
            0
        }
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            f.exit_code()
        }
    }
}
