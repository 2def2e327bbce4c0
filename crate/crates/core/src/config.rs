//! Run configuration: TOML schema, defaults, dotted-key overrides, validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvKind, Tier};
use crate::error::{RrlError, Result};
use crate::estimate::GaeConfig;
use crate::model::SamplingConfig;
use crate::optimize::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rrl,
    VanillaPpo,
    CsOnly,
    PgsOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Rrl, Mode::VanillaPpo, Mode::CsOnly, Mode::PgsOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rrl => "rrl",
            Mode::VanillaPpo => "vanilla_ppo",
            Mode::CsOnly => "cs_only",
            Mode::PgsOnly => "pgs_only",
        }
    }

    pub fn extracts_policy_states(self) -> bool {
        matches!(self, Mode::Rrl | Mode::PgsOnly)
    }

    pub fn extracts_canonical_states(self) -> bool {
        matches!(self, Mode::Rrl | Mode::CsOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = RrlError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RrlError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Critic-loss window length, in steps.
    pub window: usize,
    pub rel_tol: f64,
    /// Steps after which the gate opens regardless; defaults to a tenth of
    /// the run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_warmup_steps: Option<u64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 20,
            rel_tol: 0.1,
            max_warmup_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env_kind: EnvKind,
    pub tiers: Vec<Tier>,
    /// Training problems per tier.
    pub problem_count: usize,
    /// Held-out problems per tier.
    pub eval_problem_count: usize,
    /// Optional problem files replacing the generated sets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_problems: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_problems: Option<PathBuf>,
    pub mode: Mode,
    pub replay_beta: f64,
    pub kl_coeff: f64,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub rollouts_per_step: usize,
    pub bc_epochs: usize,
    pub bc_lr: f64,
    pub eval_interval: u64,
    /// States sampled for the entropy diagnostic.
    pub entropy_states: usize,
    /// Samples per problem for the perplexity-variance diagnostic.
    pub ppl_k: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sampling: SamplingConfig,
    pub gae: GaeConfig,
    pub ppo: PpoConfig,
    pub gate: GateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env_kind: EnvKind::ArithTarget,
            tiers: vec![Tier::Hard],
            problem_count: 64,
            eval_problem_count: 256,
            train_problems: None,
            eval_problems: None,
            mode: Mode::Rrl,
            replay_beta: 0.1,
            kl_coeff: 0.001,
            epochs: 3,
            steps_per_epoch: 300,
            rollouts_per_step: 8,
            bc_epochs: 2,
            bc_lr: 0.3,
            eval_interval: 100,
            entropy_states: 512,
            ppl_k: 8,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            sampling: SamplingConfig::default(),
            gae: GaeConfig::default(),
            ppo: PpoConfig::default(),
            gate: GateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    pub fn max_warmup_steps(&self) -> u64 {
        self.gate
            .max_warmup_steps
            .unwrap_or_else(|| self.total_steps().div_ceil(10))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return Err(RrlError::config("tiers", "must list at least one tier"));
        }
        if self.problem_count == 0 && self.train_problems.is_none() {
            return Err(RrlError::config("problem_count", "must be at least 1"));
        }
        if self.eval_problem_count == 0 && self.eval_problems.is_none() {
            return Err(RrlError::config("eval_problem_count", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.replay_beta) {
            return Err(RrlError::config("replay_beta", "must lie in [0, 1]"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(RrlError::config("kl_coeff", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(RrlError::config("epochs", "must be at least 1"));
        }
        if self.steps_per_epoch == 0 {
            return Err(RrlError::config("steps_per_epoch", "must be at least 1"));
        }
        if self.rollouts_per_step == 0 {
            return Err(RrlError::config("rollouts_per_step", "must be at least 1"));
        }
        if !(self.bc_lr >= 0.0 && self.bc_lr.is_finite()) {
            return Err(RrlError::config("bc_lr", "must be finite and non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(RrlError::config("eval_interval", "must be at least 1"));
        }
        if self.entropy_states == 0 {
            return Err(RrlError::config("entropy_states", "must be at least 1"));
        }
        if self.ppl_k < 2 {
            return Err(RrlError::config("ppl_k", "must be at least 2"));
        }
        if self.gate.window == 0 {
            return Err(RrlError::config("gate.window", "must be at least 1"));
        }
        if !(self.gate.rel_tol > 0.0) {
            return Err(RrlError::config("gate.rel_tol", "must be positive"));
        }
        self.sampling.validate()?;
        self.gae.validate()?;
        self.ppo.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML, applies `key=value` overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| RrlError::config("<file>", e.message().to_string()))?;
        check_keys(&table, "")?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| RrlError::config("<file>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Copy with one dotted key overridden, revalidated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        Self::from_toml_str(&self.to_toml(), &[(key.to_string(), value.to_string())])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RrlError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }
}

const OPTIONAL_KEYS: [&str; 3] = ["train_problems", "eval_problems", "gate.max_warmup_steps"];

fn known_keys() -> Vec<String> {
    let table = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
    let mut keys = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(sub) => keys.extend(sub.keys().map(|s| format!("{k}.{s}"))),
            _ => keys.push(k.clone()),
        }
    }
    keys.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    keys
}

fn is_section(key: &str) -> bool {
    matches!(key, "sampling" | "gae" | "ppo" | "gate")
}

fn check_keys(table: &toml::Table, prefix: &str) -> Result<()> {
    let known = known_keys();
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if prefix.is_empty() && is_section(k) {
            match v {
                toml::Value::Table(sub) => check_keys(sub, k)?,
                _ => return Err(RrlError::config(path, "expected a table")),
            }
        } else if !known.contains(&path) {
            return Err(RrlError::config(path, "unknown key"));
        }
    }
    Ok(())
}

/// Sets a dotted key. The value is read as a TOML literal when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    if !known_keys().iter().any(|k| k == key) {
        return Err(RrlError::config(key, "unknown key"));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    match key.split_once('.') {
        Some((section, field)) => {
            let sub = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match sub {
                toml::Value::Table(t) => {
                    t.insert(field.to_string(), parsed);
                }
                _ => return Err(RrlError::config(section, "expected a table")),
            }
        }
        None => {
            table.insert(key.to_string(), parsed);
        }
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| RrlError::InvalidArgument(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
