//! The training loop: behavior cloning, then PPO steps with optional replay
//! from buffered states, periodic evaluation, checkpoints and a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::diag::{
    evaluate_solve_rate, export_metrics, policy_entropy, ppl_variance_distribution, read_metrics,
    truncate_metrics, write_summary, MetricsRecord, PplSummary,
};
use crate::env::{generate_problems, read_problems, write_problems, Problem};
use crate::error::{RrlError, Result};
use crate::model::{clone_reference, save_params, PolicyParams, ReferencePolicy, ValueParams};
use crate::optimize::{behavior_clone_update, ppo_update};
use crate::retro::{
    extract_promising_state, replay_probability, BufferEntry, Origin, ReplayBuffer, ReplayGate, SnapshotRecord,
};
use crate::rollout::{rollout_from, Trajectory};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BUFFER_FILE: &str = "buffer.jsonl";
pub const FINAL_PARAMS_FILE: &str = "params.json";
pub const FAILURE_FILE: &str = "failure.json";
pub const TRAIN_PROBLEMS_FILE: &str = "problems_train.jsonl";
pub const EVAL_PROBLEMS_FILE: &str = "problems_eval.jsonl";

const CHECKPOINT_FORMAT: &str = "rrl-checkpoint-v1";

// rng stream tags
const STREAM_TRAIN_PROBLEMS: u64 = 1;
const STREAM_EVAL_PROBLEMS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_BC: u64 = 4;
const STREAM_STEP: u64 = 5;
const STREAM_PPO: u64 = 6;
const STREAM_EVAL: u64 = 7;
const STREAM_ROLLOUT: u64 = 1 << 16;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` at `step`, independent of how much any other
/// stream has been consumed.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    mix(mix(mix(seed) ^ step) ^ stream)
}

fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, step, stream))
}

/// Training and evaluation problem sets for a config.
pub fn problem_sets(config: &RunConfig) -> Result<(Vec<Problem>, Vec<Problem>)> {
    let build = |file: &Option<PathBuf>, count: usize, stream: u64| -> Result<Vec<Problem>> {
        if let Some(path) = file {
            let ps = read_problems(path)?;
            if ps.is_empty() {
                return Err(RrlError::InvalidArgument(format!("{} holds no problems", path.display())));
            }
            return Ok(ps);
        }
        let mut all = Vec::new();
        for &tier in &config.tiers {
            all.extend(generate_problems(
                config.env_kind,
                tier,
                count,
                derive_seed(config.seed, 0, stream),
            )?);
        }
        Ok(all)
    };
    Ok((
        build(&config.train_problems, config.problem_count, STREAM_TRAIN_PROBLEMS)?,
        build(&config.eval_problems, config.eval_problem_count, STREAM_EVAL_PROBLEMS)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    step: u64,
    policy: PolicyParams,
    value: ValueParams,
    reference: PolicyParams,
    buffer: ReplayBuffer,
    gate: ReplayGate,
    value_losses: Vec<f64>,
    replay_attempts: u64,
    replay_misses: u64,
    replay_successes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub steps_completed: u64,
    pub resumed_from: Option<u64>,
    /// Interpretive choices that shape the run beyond the config values.
    pub notes: Vec<String>,
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| RrlError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| RrlError::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory when present.
    pub resume: bool,
    /// Return after this many completed steps, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub steps_completed: u64,
    pub first_eval: MetricsRecord,
    pub last_eval: MetricsRecord,
}

struct Run<'a> {
    config: &'a RunConfig,
    train: Vec<Problem>,
    eval: Vec<Problem>,
    policy: PolicyParams,
    value: ValueParams,
    reference: ReferencePolicy,
    buffer: ReplayBuffer,
    gate: ReplayGate,
    value_losses: Vec<f64>,
    attempts: u64,
    misses: u64,
    successes: u64,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(value).expect("value serializes");
    fs::write(&tmp, text).map_err(|e| RrlError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RrlError::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(RrlError::io(path, e)),
        _ => Ok(()),
    }
}

fn truncate_snapshots(path: &Path, last_step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(RrlError::io(path, e)),
    };
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let rec: SnapshotRecord = serde_json::from_str(line).map_err(|e| RrlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.step <= last_step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| RrlError::io(path, e))
}

impl<'a> Run<'a> {
    fn fresh(config: &'a RunConfig) -> Result<Self> {
        let (train, eval) = problem_sets(config)?;
        let kind = config.env_kind;
        if let Some(p) = train.iter().chain(&eval).find(|p| p.env_kind != kind) {
            return Err(RrlError::InvalidArgument(format!(
                "problem `{}` is {} but the run is {}",
                p.id, p.env_kind, kind
            )));
        }
        let mut rng = stream_rng(config.seed, 0, STREAM_INIT);
        let mut policy = PolicyParams::for_env(kind, &mut rng);
        let value = ValueParams::for_env(kind, &mut rng);
        let mut bc_rng = stream_rng(config.seed, 0, STREAM_BC);
        behavior_clone_update(&train, &mut policy, config.bc_lr, config.bc_epochs, &mut bc_rng)?;
        let reference = clone_reference(&policy);
        let buffer = ReplayBuffer::new(train.iter().map(|p| p.id.clone()));
        let gate = ReplayGate::new(config.gate.window, config.gate.rel_tol, config.max_warmup_steps() as usize);
        Ok(Self {
            config,
            train,
            eval,
            policy,
            value,
            reference,
            buffer,
            gate,
            value_losses: Vec::new(),
            attempts: 0,
            misses: 0,
            successes: 0,
        })
    }

    fn restore(config: &'a RunConfig, ckpt: Checkpoint) -> Result<Self> {
        let (train, eval) = problem_sets(config)?;
        Ok(Self {
            config,
            train,
            eval,
            policy: ckpt.policy,
            value: ckpt.value,
            reference: clone_reference(&ckpt.reference),
            buffer: ckpt.buffer,
            gate: ckpt.gate,
            value_losses: ckpt.value_losses,
            attempts: ckpt.replay_attempts,
            misses: ckpt.replay_misses,
            successes: ckpt.replay_successes,
        })
    }

    fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            step,
            policy: self.policy.clone(),
            value: self.value.clone(),
            reference: self.reference.params().clone(),
            buffer: self.buffer.clone(),
            gate: self.gate.clone(),
            value_losses: self.value_losses.clone(),
            replay_attempts: self.attempts,
            replay_misses: self.misses,
            replay_successes: self.successes,
        }
    }

    fn base_record(&self, step: u64, epoch: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch,
            mode: self.config.mode.as_str().into(),
            problem_id: None,
            gate_open: self.gate.is_open(),
            replay_probability: 0.0,
            replayed: false,
            replay_attempts: self.attempts,
            replay_misses: self.misses,
            replay_successes: self.successes,
            buffer_occupancy: self.buffer.len(),
            batch_solve_rate: None,
            update: None,
            solve_rate: None,
            solve_rate_overall: None,
            mean_policy_entropy: None,
            ppl_variance: None,
        }
    }

    fn evaluate(&self, step: u64, epoch: u64) -> Result<MetricsRecord> {
        let c = self.config;
        let rates = evaluate_solve_rate(&self.policy, &self.eval)?;
        let mut rng = stream_rng(c.seed, step, STREAM_EVAL);
        let h = policy_entropy(&self.policy, &self.eval, c.entropy_states, &c.sampling, &mut rng)?;
        let v = ppl_variance_distribution(&self.policy, &self.eval, c.ppl_k, &c.sampling, &mut rng)?;
        let mut r = self.base_record(step, epoch);
        r.solve_rate = Some(rates.rates());
        r.solve_rate_overall = Some(rates.overall());
        r.mean_policy_entropy = Some(h);
        r.ppl_variance = Some(PplSummary::from_variances(&v));
        Ok(r)
    }

    fn extraction_enabled(&self) -> bool {
        self.config.mode != Mode::VanillaPpo && self.config.replay_beta > 0.0 && self.gate.is_open()
    }

    /// One step of the loop for global step index `g` (0-based).
    fn step(&mut self, g: u64) -> Result<MetricsRecord> {
        let c = self.config;
        let epoch = g / c.steps_per_epoch + 1;
        let in_epoch = g % c.steps_per_epoch;
        let mut rng = stream_rng(c.seed, g, STREAM_STEP);
        let problem = &self.train[rng.gen_range(0..self.train.len())];

        let gate_open = self.gate.update(&self.value_losses);
        let p = if c.mode == Mode::VanillaPpo || !gate_open {
            0.0
        } else {
            replay_probability(epoch, in_epoch, c.steps_per_epoch, c.replay_beta)
        };
        let fire = rng.gen::<f64>() < p;
        let mut entry: Option<BufferEntry> = None;
        if fire {
            self.attempts += 1;
            entry = self.buffer.select(&problem.id, &mut rng);
            if entry.is_none() {
                self.misses += 1;
            }
        }

        let prefix: &[u32] = entry.as_ref().map(|e| e.state.as_slice()).unwrap_or(&[]);
        let (policy, value, reference) = (&self.policy, &self.value, &self.reference);
        let mut trajs: Vec<Trajectory> = (0..c.rollouts_per_step as u64)
            .into_par_iter()
            .map(|w| {
                let mut r = stream_rng(c.seed, g, STREAM_ROLLOUT + w);
                rollout_from(problem, prefix, policy, reference, value, &c.sampling, &mut r)
            })
            .collect::<Result<_>>()?;
        let solved = trajs.iter().filter(|t| t.outcome.is_solved()).count();

        if let Some(e) = &entry {
            if solved > 0 {
                self.successes += 1;
            }
            self.buffer.record_outcome(e, solved > 0)?;
        } else if self.extraction_enabled() {
            for t in &trajs {
                if c.mode.extracts_policy_states() {
                    if let Some(s) =
                        extract_promising_state(problem, &t.tokens, &self.value, Origin::PolicyGenerated, g)?
                    {
                        self.buffer.insert(s)?;
                    }
                }
                if c.mode.extracts_canonical_states() && !t.outcome.is_solved() {
                    if let Some(s) =
                        extract_promising_state(problem, &problem.canonical, &self.value, Origin::Canonical, g)?
                    {
                        self.buffer.insert(s)?;
                    }
                }
            }
        }

        trajs.iter_mut().for_each(|t| t.shape(c.kl_coeff));
        let mut ppo_rng = stream_rng(c.seed, g, STREAM_PPO);
        let stats = ppo_update(&trajs, &mut self.policy, &mut self.value, &c.ppo, &c.gae, &mut ppo_rng)?;
        self.value_losses.push(stats.value_loss);

        let mut r = self.base_record(g + 1, epoch);
        r.problem_id = Some(problem.id.clone());
        r.gate_open = gate_open;
        r.replay_probability = p;
        r.replayed = entry.is_some();
        r.batch_solve_rate = Some(solved as f64 / trajs.len() as f64);
        r.update = Some(stats);
        Ok(r)
    }
}

const NOTES: [&str; 5] = [
    "one problem per step with rollouts_per_step trajectories from a shared start state",
    "one replay decision per step; the chosen state's counter moves once per step and it exits if any rollout solves",
    "a replay draw on an empty buffer falls back to a scratch rollout and counts as a miss",
    "state extraction runs only on scratch steps after the critic gate opens and only when replay_beta > 0",
    "perplexity variance uses ppl_k samples per problem at the training sampling settings",
];

pub fn train_run(config: &RunConfig) -> Result<RunSummary> {
    train_run_with(config, &TrainOptions::default())
}

pub fn train_run_with(config: &RunConfig, options: &TrainOptions) -> Result<RunSummary> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| RrlError::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let buffer_path = dir.join(BUFFER_FILE);

    let existing: Option<Checkpoint> = if options.resume && ckpt_path.exists() {
        let text = fs::read_to_string(&ckpt_path).map_err(|e| RrlError::io(&ckpt_path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| RrlError::Parse {
            path: ckpt_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(RrlError::InvalidArgument(format!("unsupported checkpoint `{}`", ckpt.format)));
        }
        Some(ckpt)
    } else {
        None
    };

    let started_at = chrono::Utc::now().to_rfc3339();
    let (mut run, start, resumed_from) = match existing {
        Some(ckpt) => {
            let step = ckpt.step;
            truncate_metrics(&metrics_path, step)?;
            truncate_snapshots(&buffer_path, step)?;
            (Run::restore(config, ckpt)?, step, Some(step))
        }
        None => {
            for f in [METRICS_FILE, CHECKPOINT_FILE, BUFFER_FILE, SUMMARY_FILE, FINAL_PARAMS_FILE, FAILURE_FILE] {
                remove_if_exists(&dir.join(f))?;
            }
            let run = Run::fresh(config)?;
            write_problems(dir.join(TRAIN_PROBLEMS_FILE), &run.train)?;
            write_problems(dir.join(EVAL_PROBLEMS_FILE), &run.eval)?;
            let first = run.evaluate(0, 0)?;
            export_metrics(&[first], &metrics_path)?;
            run.buffer.export_snapshot(&buffer_path, 0, config.env_kind.vocabulary())?;
            write_json_atomic(&ckpt_path, &run.checkpoint(0))?;
            (run, 0, None)
        }
    };

    let mut manifest = Manifest {
        format: "rrl-manifest-v1".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config: config.clone(),
        started_at,
        finished_at: None,
        steps_completed: start,
        resumed_from,
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    };
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;

    let total = config.total_steps();
    let mut completed = start;
    for g in start..total {
        let record = match run.step(g) {
            Ok(r) => r,
            Err(e) => {
                let failure = serde_json::json!({ "step": g, "error": e.to_string() });
                write_json_atomic(&dir.join(FAILURE_FILE), &failure)?;
                return Err(e);
            }
        };
        export_metrics(&[record], &metrics_path)?;
        completed = g + 1;
        if completed % config.eval_interval == 0 || completed == total {
            let epoch = g / config.steps_per_epoch + 1;
            export_metrics(&[run.evaluate(completed, epoch)?], &metrics_path)?;
            run.buffer
                .export_snapshot(&buffer_path, completed, config.env_kind.vocabulary())?;
            write_json_atomic(&ckpt_path, &run.checkpoint(completed))?;
        }
        if options.stop_after == Some(completed) && completed < total {
            break;
        }
    }

    let records = read_metrics(&metrics_path)?;
    manifest.steps_completed = completed;
    if completed == total {
        save_params(dir.join(FINAL_PARAMS_FILE), &run.policy, &run.value)?;
        write_summary(&records, dir.join(SUMMARY_FILE))?;
        manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
    }
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;

    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.is_eval()).collect();
    Ok(RunSummary {
        output_dir: dir.clone(),
        steps_completed: completed,
        first_eval: evals.first().copied().cloned().expect("initial evaluation recorded"),
        last_eval: evals.last().copied().cloned().expect("initial evaluation recorded"),
    })
}
