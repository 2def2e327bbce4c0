//! Generalized advantage estimation over per-token rewards.

use serde::{Deserialize, Serialize};

use crate::error::{RrlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lam: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lam: 0.95,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RrlError::config("gae.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(RrlError::config("gae.lam", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Returns `(advantages, returns)`; the value after the last step is zero.
pub fn compute_gae(rewards: &[f64], values: &[f64], config: &GaeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(RrlError::DimensionMismatch {
            expected: rewards.len(),
            actual: values.len(),
        });
    }
    if rewards.is_empty() {
        return Err(RrlError::InvalidArgument("empty reward sequence".into()));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + config.gamma * next_value - values[t];
        running = delta + config.gamma * config.lam * running;
        advantages[t] = running;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}
