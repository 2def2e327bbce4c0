//! Linear-softmax policy and linear critic over environment features.
//!
//! Parameters are plain owned values. Rollout workers share `&PolicyParams`
//! and `&ValueParams`; an update needs `&mut`, so the borrow checker enforces
//! that no rollout reads parameters while they are being written.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvKind, TokenId};
use crate::error::{RrlError, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RrlError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Feature dimension × vocabulary size.
    pub w: Matrix,
}

impl PolicyParams {
    pub fn zeros(features: usize, actions: usize) -> Self {
        Self {
            w: Matrix::zeros(features, actions),
        }
    }

    /// Uniform in [-0.01, 0.01].
    pub fn init(features: usize, actions: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(features, actions);
        p.w.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.01..=0.01));
        p
    }

    pub fn for_env(kind: EnvKind, rng: &mut impl Rng) -> Self {
        Self::init(kind.feature_dim(), kind.vocabulary().size(), rng)
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows
    }

    pub fn action_count(&self) -> usize {
        self.w.cols
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.w.rows {
            return Err(RrlError::DimensionMismatch {
                expected: self.w.rows,
                actual: features.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub w: Vec<f64>,
}

impl ValueParams {
    pub fn zeros(features: usize) -> Self {
        Self {
            w: vec![0.0; features],
        }
    }

    pub fn init(features: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: (0..features).map(|_| rng.gen_range(-0.01..=0.01)).collect(),
        }
    }

    pub fn for_env(kind: EnvKind, rng: &mut impl Rng) -> Self {
        Self::init(kind.feature_dim(), rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.9,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RrlError::config("sampling.temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RrlError::config("sampling.top_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

pub fn action_logits(params: &PolicyParams, features: &[f64]) -> Result<Vec<f64>> {
    params.check_features(features)?;
    Ok(logits_unchecked(params, features))
}

fn logits_unchecked(params: &PolicyParams, features: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; params.w.cols];
    for (f, &x) in features.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(params.w.row(f)) {
            *o += x * w;
        }
    }
    out
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of softmax(logits).
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .map(|lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// KL(softmax(p) || softmax(q)).
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Distribution actually sampled from: temperature scaling, then the smallest
/// logit-descending set whose mass reaches `top_p`, renormalized.
pub fn nucleus_distribution(logits: &[f64], sampling: &SamplingConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / sampling.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps lower ids first among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= sampling.top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|p| *p /= mass);
    kept
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples with temperature and nucleus truncation; the returned log-probability
/// is under the untruncated temperature-1 distribution.
pub fn sample_action(
    params: &PolicyParams,
    features: &[f64],
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<(TokenId, f64)> {
    let logits = action_logits(params, features)?;
    let a = draw(&nucleus_distribution(&logits, sampling), rng);
    Ok((a as TokenId, logits[a] - log_sum_exp(&logits)))
}

/// Argmax token, lowest id on ties.
pub fn greedy_action(params: &PolicyParams, features: &[f64]) -> Result<TokenId> {
    let logits = action_logits(params, features)?;
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    Ok(best as TokenId)
}

pub fn log_prob(params: &PolicyParams, features: &[f64], action: TokenId) -> Result<f64> {
    let logits = action_logits(params, features)?;
    let a = check_action(params, action)?;
    Ok(logits[a] - log_sum_exp(&logits))
}

fn check_action(params: &PolicyParams, action: TokenId) -> Result<usize> {
    let a = action as usize;
    if a >= params.w.cols {
        return Err(RrlError::OutOfVocabulary {
            token: action,
            size: params.w.cols,
        });
    }
    Ok(a)
}

/// `log p(action | features)` and its gradient `features ⊗ (onehot(action) - softmax)`.
pub fn log_prob_and_grad(
    params: &PolicyParams,
    features: &[f64],
    action: TokenId,
) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(params.w.rows, params.w.cols);
    let lp = accumulate_log_prob_grad(params, features, action, 1.0, &mut grad)?;
    Ok((lp, grad))
}

/// Adds `scale * ∂ log p / ∂W` into `grad` and returns `log p`.
pub fn accumulate_log_prob_grad(
    params: &PolicyParams,
    features: &[f64],
    action: TokenId,
    scale: f64,
    grad: &mut Matrix,
) -> Result<f64> {
    let logits = action_logits(params, features)?;
    let a = check_action(params, action)?;
    let lse = log_sum_exp(&logits);
    let mut coeff: Vec<f64> = logits.iter().map(|l| -(l - lse).exp()).collect();
    coeff[a] += 1.0;
    let cols = params.w.cols;
    for (f, &x) in features.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &mut grad.data[f * cols..(f + 1) * cols];
        for (g, c) in row.iter_mut().zip(&coeff) {
            *g += scale * x * c;
        }
    }
    Ok(logits[a] - lse)
}

pub fn state_value(vparams: &ValueParams, features: &[f64]) -> Result<f64> {
    if features.len() != vparams.w.len() {
        return Err(RrlError::DimensionMismatch {
            expected: vparams.w.len(),
            actual: features.len(),
        });
    }
    Ok(vparams.w.iter().zip(features).map(|(w, x)| w * x).sum())
}

/// Frozen snapshot of a policy used for KL shaping.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(Arc<PolicyParams>);

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn log_prob(&self, features: &[f64], action: TokenId) -> Result<f64> {
        log_prob(&self.0, features, action)
    }
}

pub fn clone_reference(params: &PolicyParams) -> ReferencePolicy {
    ReferencePolicy(Arc::new(params.clone()))
}

/// On-disk parameter snapshot. Floats are written in shortest round-trip form
/// and parsed back exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub feature_dim: usize,
    pub action_count: usize,
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

pub const PARAMS_FORMAT: &str = "rrl-params-v1";

impl ParamsFile {
    pub fn new(policy: &PolicyParams, value: &ValueParams) -> Self {
        Self {
            format: PARAMS_FORMAT.into(),
            feature_dim: policy.feature_dim(),
            action_count: policy.action_count(),
            policy: policy.w.data.clone(),
            value: value.w.clone(),
        }
    }

    pub fn into_params(self) -> Result<(PolicyParams, ValueParams)> {
        if self.format != PARAMS_FORMAT {
            return Err(RrlError::InvalidArgument(format!(
                "unsupported parameter format `{}`",
                self.format
            )));
        }
        let w = Matrix::from_vec(self.feature_dim, self.action_count, self.policy)?;
        if self.value.len() != self.feature_dim {
            return Err(RrlError::DimensionMismatch {
                expected: self.feature_dim,
                actual: self.value.len(),
            });
        }
        if !w.is_finite() || !self.value.iter().all(|x| x.is_finite()) {
            return Err(RrlError::InvalidArgument("non-finite parameter".into()));
        }
        Ok((PolicyParams { w }, ValueParams { w: self.value }))
    }
}

pub fn save_params(path: impl AsRef<Path>, policy: &PolicyParams, value: &ValueParams) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&ParamsFile::new(policy, value)).expect("params serialize");
    fs::write(path, text).map_err(|e| RrlError::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(PolicyParams, ValueParams)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RrlError::io(path, e))?;
    let file: ParamsFile = serde_json::from_str(&text).map_err(|e| RrlError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    file.into_params()
}
