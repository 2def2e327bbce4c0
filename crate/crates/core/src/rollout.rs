//! Trajectory generation from a bare problem or a replayed solution prefix.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_solution, compute_reward, featurize, Outcome, Problem, TokenId};
use crate::error::{RrlError, Result};
use crate::model::{sample_action, state_value, PolicyParams, ReferencePolicy, SamplingConfig, ValueParams};

/// One rollout. Per-position arrays cover only generated tokens, i.e.
/// `tokens[prefix_len..]`; prefix positions carry no data at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub prefix_len: usize,
    pub tokens: Vec<TokenId>,
    pub logp_policy: Vec<f64>,
    pub logp_ref: Vec<f64>,
    /// Critic value of the state before each generated token.
    pub values: Vec<f64>,
    /// Feature vector of the state before each generated token.
    #[serde(skip)]
    pub features: Vec<Vec<f64>>,
    pub outcome: Outcome,
    pub task_reward: f64,
    /// Shaped per-token rewards; empty until [`Trajectory::shape`] is called.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn shape(&mut self, kl_coeff: f64) {
        self.rewards = shape_rewards(self, kl_coeff);
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prefix_len
    }

    pub fn actions(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.tokens[..self.prefix_len]
    }

    pub fn is_replay(&self) -> bool {
        self.prefix_len > 0
    }
}

pub fn rollout_from(
    problem: &Problem,
    prefix: &[TokenId],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    vparams: &ValueParams,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let vocab = problem.vocabulary();
    vocab.check_ids(prefix)?;
    if prefix.len() >= problem.max_len {
        return Err(RrlError::PrefixTooLong {
            len: prefix.len(),
            limit: problem.max_len - 1,
        });
    }
    if prefix.contains(&vocab.eot()) {
        return Err(RrlError::InvalidArgument(
            "a replay prefix cannot contain the terminal token".into(),
        ));
    }
    let budget = problem.max_len - prefix.len();
    let mut tokens = prefix.to_vec();
    let mut logp_policy = Vec::with_capacity(budget);
    let mut logp_ref = Vec::with_capacity(budget);
    let mut values = Vec::with_capacity(budget);
    let mut features = Vec::with_capacity(budget);
    while tokens.len() < problem.max_len {
        let f = featurize(problem, &tokens)?;
        values.push(state_value(vparams, &f)?);
        let (action, lp) = sample_action(policy, &f, sampling, rng)?;
        logp_policy.push(lp);
        logp_ref.push(reference.log_prob(&f, action)?);
        features.push(f);
        tokens.push(action);
        if action == vocab.eot() {
            break;
        }
    }
    let outcome = check_solution(problem, &tokens);
    let task_reward = compute_reward(&outcome);
    Ok(Trajectory {
        problem_id: problem.id.clone(),
        prefix_len: prefix.len(),
        tokens,
        logp_policy,
        logp_ref,
        values,
        features,
        outcome,
        task_reward,
        rewards: Vec::new(),
    })
}

/// Per-token rewards `-kl_coeff * (log π - log π_ref)`, with the task reward
/// added at the last generated position.
pub fn shape_rewards(traj: &Trajectory, kl_coeff: f64) -> Vec<f64> {
    let mut rewards: Vec<f64> = traj
        .logp_policy
        .iter()
        .zip(&traj.logp_ref)
        .map(|(p, r)| -kl_coeff * (p - r))
        .collect();
    if let Some(last) = rewards.last_mut() {
        *last += traj.task_reward;
    }
    rewards
}

/// Appends trajectories as JSON lines (features are not written).
pub fn append_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RrlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajectories {
        let line = serde_json::to_string(t).expect("trajectory serializes");
        writeln!(w, "{line}").map_err(|e| RrlError::io(path, e))?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}
