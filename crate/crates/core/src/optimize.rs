//! Clipped-surrogate PPO for the policy and critic, and behavior cloning.
//!
//! Loss terms are built only from a trajectory's generated-position arrays
//! (stored features, actions, log-probs, values, shaped rewards). Replayed
//! prefix tokens never contribute: there is no stored data for them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{featurize, Problem, TokenId};
use crate::error::{RrlError, Result};
use crate::estimate::{compute_gae, GaeConfig};
use crate::model::{accumulate_log_prob_grad, log_prob, state_value, Matrix, PolicyParams, ValueParams};
use crate::rollout::Trajectory;

const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    /// Tokens per minibatch.
    pub minibatch_size: usize,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub value_loss_coeff: f64,
    pub normalize_advantages: bool,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            ppo_epochs: 4,
            minibatch_size: 64,
            lr_policy: 0.05,
            lr_value: 0.1,
            value_loss_coeff: 0.5,
            normalize_advantages: true,
            max_grad_norm: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(RrlError::config("ppo.clip_eps", "must be positive"));
        }
        if self.ppo_epochs == 0 {
            return Err(RrlError::config("ppo.ppo_epochs", "must be at least 1"));
        }
        if self.minibatch_size == 0 {
            return Err(RrlError::config("ppo.minibatch_size", "must be at least 1"));
        }
        if !(self.lr_policy > 0.0) {
            return Err(RrlError::config("ppo.lr_policy", "must be positive"));
        }
        if !(self.lr_value > 0.0) {
            return Err(RrlError::config("ppo.lr_value", "must be positive"));
        }
        if !(self.value_loss_coeff >= 0.0) {
            return Err(RrlError::config("ppo.value_loss_coeff", "must be non-negative"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(RrlError::config("ppo.max_grad_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// One generated token with its training targets.
#[derive(Debug, Clone, Copy)]
struct TokenSample<'a> {
    features: &'a [f64],
    action: TokenId,
    logp_old: f64,
    advantage: f64,
    ret: f64,
    traj: usize,
}

fn collect_samples<'a>(
    trajectories: &'a [Trajectory],
    config: &PpoConfig,
    gae: &GaeConfig,
) -> Result<Vec<TokenSample<'a>>> {
    if trajectories.is_empty() {
        return Err(RrlError::InvalidArgument("empty trajectory batch".into()));
    }
    let mut samples = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        let n = t.generated_len();
        if t.rewards.len() != n || t.values.len() != n || t.features.len() != n || t.logp_policy.len() != n {
            return Err(RrlError::InvalidArgument(format!(
                "trajectory {i} ({}) has inconsistent per-token arrays or no shaped rewards",
                t.problem_id
            )));
        }
        let (adv, ret) = compute_gae(&t.rewards, &t.values, gae)?;
        for (k, &action) in t.actions().iter().enumerate() {
            samples.push(TokenSample {
                features: &t.features[k],
                action,
                logp_old: t.logp_policy[k],
                advantage: adv[k],
                ret: ret[k],
                traj: i,
            });
        }
    }
    if config.normalize_advantages {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for s in &mut samples {
            s.advantage = (s.advantage - mean) / (std + ADV_EPS);
        }
    }
    Ok(samples)
}

struct MinibatchResult {
    stats: UpdateStats,
    policy_grad: Matrix,
    value_grad: Vec<f64>,
}

/// Loss values and gradients of `policy_loss + value_loss_coeff * value_loss`
/// on a set of samples; gradients are not clipped.
fn minibatch_gradients(
    samples: &[TokenSample<'_>],
    policy: &PolicyParams,
    vparams: &ValueParams,
    config: &PpoConfig,
) -> Result<MinibatchResult> {
    let n = samples.len() as f64;
    let mut policy_grad = Matrix::zeros(policy.feature_dim(), policy.action_count());
    let mut value_grad = vec![0.0; vparams.w.len()];
    let (mut policy_loss, mut value_loss, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    for s in samples {
        let logp_new = log_prob(policy, s.features, s.action)?;
        let ratio = (logp_new - s.logp_old).exp();
        let unclipped = ratio * s.advantage;
        let clipped_ratio = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        let surrogate = clipped_ratio * s.advantage;
        policy_loss -= unclipped.min(surrogate) / n;
        if (ratio - 1.0).abs() > config.clip_eps {
            clipped += 1;
        }
        if unclipped <= surrogate && s.advantage != 0.0 {
            // ∂(-ρA)/∂W = -Aρ ∇log π
            accumulate_log_prob_grad(policy, s.features, s.action, -s.advantage * ratio / n, &mut policy_grad)?;
        }
        kl += (s.logp_old - logp_new) / n;

        let v = state_value(vparams, s.features)?;
        let err = v - s.ret;
        value_loss += err * err / n;
        let k = config.value_loss_coeff * 2.0 * err / n;
        for (g, x) in value_grad.iter_mut().zip(s.features) {
            *g += k * x;
        }
    }
    let grad_norm = (policy_grad.squared_norm() + value_grad.iter().map(|g| g * g).sum::<f64>()).sqrt();
    Ok(MinibatchResult {
        stats: UpdateStats {
            policy_loss,
            value_loss,
            mean_kl: kl,
            clip_fraction: clipped as f64 / n,
            grad_norm,
        },
        policy_grad,
        value_grad,
    })
}

fn describe_batch(trajectories: &[Trajectory], samples: &[TokenSample<'_>]) -> String {
    let mut ids: Vec<usize> = samples.iter().map(|s| s.traj).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&i| format!("#{i} {}", trajectories[i].problem_id))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Full-batch PPO objective at the current parameters:
/// `(policy_loss, value_loss)` with advantages prepared exactly as in
/// [`ppo_update`]. A pure function of the stored generated-position arrays.
pub fn ppo_loss(
    trajectories: &[Trajectory],
    policy: &PolicyParams,
    vparams: &ValueParams,
    config: &PpoConfig,
    gae: &GaeConfig,
) -> Result<(f64, f64)> {
    let samples = collect_samples(trajectories, config, gae)?;
    let r = minibatch_gradients(&samples, policy, vparams, config)?;
    Ok((r.stats.policy_loss, r.stats.value_loss))
}

/// Full-batch objective `policy_loss + value_loss_coeff * value_loss` with its
/// unclipped gradients with respect to the policy and value weights.
pub fn ppo_objective_and_grad(
    trajectories: &[Trajectory],
    policy: &PolicyParams,
    vparams: &ValueParams,
    config: &PpoConfig,
    gae: &GaeConfig,
) -> Result<(f64, Matrix, Vec<f64>)> {
    let samples = collect_samples(trajectories, config, gae)?;
    let r = minibatch_gradients(&samples, policy, vparams, config)?;
    let objective = r.stats.policy_loss + config.value_loss_coeff * r.stats.value_loss;
    Ok((objective, r.policy_grad, r.value_grad))
}

pub fn ppo_update(
    trajectories: &[Trajectory],
    policy: &mut PolicyParams,
    vparams: &mut ValueParams,
    config: &PpoConfig,
    gae: &GaeConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    ppo_update_traced(trajectories, policy, vparams, config, gae, rng).map(|(s, _)| s)
}

/// Like [`ppo_update`], also returning the stats of every minibatch in order.
pub fn ppo_update_traced(
    trajectories: &[Trajectory],
    policy: &mut PolicyParams,
    vparams: &mut ValueParams,
    config: &PpoConfig,
    gae: &GaeConfig,
    rng: &mut impl Rng,
) -> Result<(UpdateStats, Vec<UpdateStats>)> {
    let samples = collect_samples(trajectories, config, gae)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..config.ppo_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let batch: Vec<TokenSample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let mut r = minibatch_gradients(&batch, policy, vparams, config)?;
            let s = &r.stats;
            if !(s.policy_loss.is_finite() && s.value_loss.is_finite() && s.grad_norm.is_finite()) {
                return Err(RrlError::NonFinite {
                    what: "loss",
                    batch: describe_batch(trajectories, &batch),
                });
            }
            if r.stats.grad_norm > config.max_grad_norm {
                let k = config.max_grad_norm / r.stats.grad_norm;
                r.policy_grad.scale(k);
                r.value_grad.iter_mut().for_each(|g| *g *= k);
                r.stats.grad_norm = config.max_grad_norm;
            }
            policy.w.add_scaled(&r.policy_grad, -config.lr_policy);
            for (w, g) in vparams.w.iter_mut().zip(&r.value_grad) {
                *w -= config.lr_value * g;
            }
            trace.push(r.stats);
        }
    }
    let n = trace.len() as f64;
    let mean = |f: fn(&UpdateStats) -> f64| trace.iter().map(f).sum::<f64>() / n;
    let stats = UpdateStats {
        policy_loss: mean(|s| s.policy_loss),
        value_loss: mean(|s| s.value_loss),
        mean_kl: mean(|s| s.mean_kl),
        clip_fraction: mean(|s| s.clip_fraction),
        grad_norm: mean(|s| s.grad_norm),
    };
    Ok((stats, trace))
}

/// (features, action) pairs along every canonical solution.
fn canonical_steps(problems: &[Problem]) -> Result<Vec<Vec<(Vec<f64>, TokenId)>>> {
    problems
        .iter()
        .map(|p| {
            (0..p.canonical.len())
                .map(|t| Ok((featurize(p, &p.canonical[..t])?, p.canonical[t])))
                .collect()
        })
        .collect()
}

fn nll_of(steps: &[Vec<(Vec<f64>, TokenId)>], policy: &PolicyParams) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for problem in steps {
        for (f, a) in problem {
            total -= log_prob(policy, f, *a)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean per-token negative log-likelihood of the canonical solutions.
pub fn canonical_nll(problems: &[Problem], policy: &PolicyParams) -> Result<f64> {
    nll_of(&canonical_steps(problems)?, policy)
}

/// Gradient ascent on canonical-solution log-likelihood, one step per problem
/// (mean over its tokens), problems reshuffled every epoch. Returns the mean
/// NLL per token after training.
pub fn behavior_clone_update(
    problems: &[Problem],
    policy: &mut PolicyParams,
    lr: f64,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let history = behavior_clone_history(problems, policy, lr, epochs, rng)?;
    Ok(*history.last().expect("history holds the initial NLL"))
}

/// NLL before training followed by the NLL after each epoch.
pub fn behavior_clone_history(
    problems: &[Problem],
    policy: &mut PolicyParams,
    lr: f64,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let steps = canonical_steps(problems)?;
    let mut history = vec![nll_of(&steps, policy)?];
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut grad = Matrix::zeros(policy.feature_dim(), policy.action_count());
    for _ in 0..epochs {
        order.shuffle(rng);
        for &i in &order {
            let tokens = &steps[i];
            grad.scale(0.0);
            let k = 1.0 / tokens.len() as f64;
            for (f, a) in tokens {
                accumulate_log_prob_grad(policy, f, *a, k, &mut grad)?;
            }
            policy.w.add_scaled(&grad, lr);
        }
        history.push(nll_of(&steps, policy)?);
    }
    Ok(history)
}
