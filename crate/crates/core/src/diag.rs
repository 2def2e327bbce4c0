//! Evaluation and exploration diagnostics, plus the metrics stream.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_solution, featurize, Problem, Tier, TokenId};
use crate::error::{RrlError, Result};
use crate::model::{action_logits, entropy, greedy_action, sample_action, PolicyParams, SamplingConfig};
use crate::optimize::UpdateStats;

pub const METRICS_FORMAT: &str = "rrl-metrics-v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierScore {
    pub solved: usize,
    pub total: usize,
}

impl TierScore {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.solved as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveRates {
    pub per_tier: BTreeMap<Tier, TierScore>,
}

impl SolveRates {
    pub fn rate(&self, tier: Tier) -> Option<f64> {
        self.per_tier.get(&tier).map(TierScore::rate)
    }

    pub fn overall(&self) -> f64 {
        let solved: usize = self.per_tier.values().map(|s| s.solved).sum();
        let total: usize = self.per_tier.values().map(|s| s.total).sum();
        if total == 0 {
            0.0
        } else {
            solved as f64 / total as f64
        }
    }

    pub fn rates(&self) -> BTreeMap<Tier, f64> {
        self.per_tier.iter().map(|(t, s)| (*t, s.rate())).collect()
    }
}

/// Argmax decoding until the terminal token or the length limit.
pub fn greedy_decode(problem: &Problem, policy: &PolicyParams) -> Result<Vec<TokenId>> {
    let eot = problem.vocabulary().eot();
    let mut tokens = Vec::with_capacity(problem.max_len);
    while tokens.len() < problem.max_len {
        let a = greedy_action(policy, &featurize(problem, &tokens)?)?;
        tokens.push(a);
        if a == eot {
            break;
        }
    }
    Ok(tokens)
}

/// Samples one solution; returns its tokens and their temperature-1
/// log-probabilities.
pub fn sample_solution(
    problem: &Problem,
    policy: &PolicyParams,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    let eot = problem.vocabulary().eot();
    let mut tokens = Vec::with_capacity(problem.max_len);
    let mut logps = Vec::with_capacity(problem.max_len);
    while tokens.len() < problem.max_len {
        let (a, lp) = sample_action(policy, &featurize(problem, &tokens)?, sampling, rng)?;
        tokens.push(a);
        logps.push(lp);
        if a == eot {
            break;
        }
    }
    Ok((tokens, logps))
}

/// Greedy solve rate per tier. Consumes no randomness.
pub fn evaluate_solve_rate(policy: &PolicyParams, problems: &[Problem]) -> Result<SolveRates> {
    if problems.is_empty() {
        return Err(RrlError::InvalidArgument("empty evaluation set".into()));
    }
    let mut rates = SolveRates::default();
    for p in problems {
        let solution = greedy_decode(p, policy)?;
        let score = rates.per_tier.entry(p.tier).or_default();
        score.total += 1;
        if check_solution(p, &solution).is_solved() {
            score.solved += 1;
        }
    }
    Ok(rates)
}

/// Solve rate per tier under the sampling configuration.
pub fn evaluate_sampled_solve_rate(
    policy: &PolicyParams,
    problems: &[Problem],
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<SolveRates> {
    if problems.is_empty() {
        return Err(RrlError::InvalidArgument("empty evaluation set".into()));
    }
    let mut rates = SolveRates::default();
    for p in problems {
        let (solution, _) = sample_solution(p, policy, sampling, rng)?;
        let score = rates.per_tier.entry(p.tier).or_default();
        score.total += 1;
        if check_solution(p, &solution).is_solved() {
            score.solved += 1;
        }
    }
    Ok(rates)
}

/// `exp(-mean log p)` over a sequence of token log-probabilities.
pub fn perplexity(logps: &[f64]) -> f64 {
    if logps.is_empty() {
        return 1.0;
    }
    (-logps.iter().sum::<f64>() / logps.len() as f64).exp()
}

/// Unbiased sample variance (n - 1 denominator); zero below two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Per problem, the variance of the perplexities of `k` sampled solutions.
pub fn ppl_variance_distribution(
    policy: &PolicyParams,
    problems: &[Problem],
    k: usize,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(RrlError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    problems
        .iter()
        .map(|p| {
            let ppls = (0..k)
                .map(|_| sample_solution(p, policy, sampling, rng).map(|(_, lp)| perplexity(&lp)))
                .collect::<Result<Vec<_>>>()?;
            Ok(sample_variance(&ppls))
        })
        .collect()
}

/// Mean temperature-1 entropy over `sample_states` states visited by sampled
/// rollouts on randomly drawn problems.
pub fn policy_entropy(
    policy: &PolicyParams,
    problems: &[Problem],
    sample_states: usize,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if sample_states == 0 {
        return Err(RrlError::InvalidArgument("sample_states must be at least 1".into()));
    }
    if problems.is_empty() {
        return Err(RrlError::InvalidArgument("empty problem set".into()));
    }
    let mut total = 0.0;
    let mut seen = 0;
    'outer: loop {
        let p = &problems[rng.gen_range(0..problems.len())];
        let eot = p.vocabulary().eot();
        let mut tokens = Vec::with_capacity(p.max_len);
        while tokens.len() < p.max_len {
            let f = featurize(p, &tokens)?;
            total += entropy(&action_logits(policy, &f)?);
            seen += 1;
            if seen == sample_states {
                break 'outer;
            }
            let (a, _) = sample_action(policy, &f, sampling, rng)?;
            tokens.push(a);
            if a == eot {
                break;
            }
        }
    }
    Ok(total / seen as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplSummary {
    pub mean: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl PplSummary {
    pub fn from_variances(xs: &[f64]) -> Self {
        let mean = if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        Self {
            mean,
            q10: quantile(xs, 0.1),
            median: quantile(xs, 0.5),
            q90: quantile(xs, 0.9),
        }
    }
}

/// One line of the metrics stream. Training steps fill the replay and update
/// fields; evaluation points fill the solve-rate and exploration fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Training steps completed when the record was written.
    pub step: u64,
    pub epoch: u64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
    pub gate_open: bool,
    pub replay_probability: f64,
    pub replayed: bool,
    pub replay_attempts: u64,
    pub replay_misses: u64,
    pub replay_successes: u64,
    pub buffer_occupancy: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_solve_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_rate: Option<BTreeMap<Tier, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_rate_overall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_policy_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_variance: Option<PplSummary>,
}

impl MetricsRecord {
    pub fn is_eval(&self) -> bool {
        self.solve_rate.is_some()
    }

    pub fn is_finite(&self) -> bool {
        let mut xs = vec![self.replay_probability];
        xs.extend(self.batch_solve_rate);
        if let Some(u) = &self.update {
            xs.extend([u.policy_loss, u.value_loss, u.mean_kl, u.clip_fraction, u.grad_norm]);
        }
        if let Some(r) = &self.solve_rate {
            xs.extend(r.values().copied());
        }
        xs.extend(self.solve_rate_overall);
        xs.extend(self.mean_policy_entropy);
        if let Some(p) = &self.ppl_variance {
            xs.extend([p.mean, p.q10, p.median, p.q90]);
        }
        xs.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsHeader {
    format: String,
    version: String,
}

fn header_line() -> String {
    serde_json::to_string(&MetricsHeader {
        format: METRICS_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
    .expect("header serializes")
}

/// Appends records to a metrics stream, writing the header line first when the
/// file is new or empty.
pub fn export_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RrlError::io(path, e))?;
    let empty = file.metadata().map_err(|e| RrlError::io(path, e))?.len() == 0;
    let mut w = BufWriter::new(file);
    if empty {
        writeln!(w, "{}", header_line()).map_err(|e| RrlError::io(path, e))?;
    }
    for r in records {
        if !r.is_finite() {
            return Err(RrlError::NonFinite {
                what: "metrics record",
                batch: format!("step {}", r.step),
            });
        }
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| RrlError::io(path, e))?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RrlError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RrlError::io(path, e))?;
        let parse_err = |message: String| RrlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if i == 0 {
            let header: MetricsHeader = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if header.format != METRICS_FORMAT {
                return Err(parse_err(format!("unexpected format `{}`", header.format)));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(records)
}

/// Rewrites the stream keeping only records with `step <= last_step`.
pub fn truncate_metrics(path: impl AsRef<Path>, last_step: u64) -> Result<()> {
    let path = path.as_ref();
    let kept: Vec<MetricsRecord> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.step <= last_step)
        .collect();
    std::fs::remove_file(path).map_err(|e| RrlError::io(path, e))?;
    export_metrics(&kept, path)
}

/// One CSV row per evaluation record.
pub fn write_summary(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| RrlError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "step",
        "epoch",
        "mode",
        "solve_easy",
        "solve_medium",
        "solve_hard",
        "solve_overall",
        "mean_policy_entropy",
        "ppl_variance_mean",
        "ppl_variance_median",
        "replay_attempts",
        "replay_misses",
        "replay_successes",
        "buffer_occupancy",
    ])
    .map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records.iter().filter(|r| r.is_eval()) {
        let tier = |t: Tier| opt(r.solve_rate.as_ref().and_then(|m| m.get(&t).copied()));
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.mode.clone(),
            tier(Tier::Easy),
            tier(Tier::Medium),
            tier(Tier::Hard),
            opt(r.solve_rate_overall),
            opt(r.mean_policy_entropy),
            opt(r.ppl_variance.map(|p| p.mean)),
            opt(r.ppl_variance.map(|p| p.median)),
            r.replay_attempts.to_string(),
            r.replay_misses.to_string(),
            r.replay_successes.to_string(),
            r.buffer_occupancy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_problems, EnvKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problems(kind: EnvKind) -> Vec<Problem> {
        let mut v = generate_problems(kind, Tier::Easy, 5, 1).unwrap();
        v.extend(generate_problems(kind, Tier::Medium, 7, 1).unwrap());
        v
    }

    fn eot_policy(kind: EnvKind) -> PolicyParams {
        let v = kind.vocabulary();
        let mut p = PolicyParams::zeros(kind.feature_dim(), v.size());
        p.w.set(kind.bias_index(), v.eot() as usize, 20.0);
        p
    }

    #[test]
    fn immediate_terminal_never_solves() {
        for kind in EnvKind::ALL {
            let ps = problems(kind);
            assert!(ps.iter().all(|p| p.content_len() >= 1));
            let r = evaluate_solve_rate(&eot_policy(kind), &ps).unwrap();
            assert_eq!(r.overall(), 0.0);
        }
    }

    #[test]
    fn overall_is_weighted_mean() {
        let ps = problems(EnvKind::ArithTarget);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pol = PolicyParams::init(EnvKind::ArithTarget.feature_dim(), 12, &mut rng);
        let r = evaluate_sampled_solve_rate(&pol, &ps, &SamplingConfig::default(), &mut rng).unwrap();
        let weighted: f64 = r.per_tier.values().map(|s| s.rate() * s.total as f64).sum::<f64>() / ps.len() as f64;
        assert!((r.overall() - weighted).abs() < 1e-12);
        assert!(evaluate_solve_rate(&pol, &[]).is_err());
    }

    #[test]
    fn greedy_eval_is_deterministic() {
        let ps = problems(EnvKind::GridPath);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pol = PolicyParams::init(EnvKind::GridPath.feature_dim(), 5, &mut rng);
        assert_eq!(evaluate_solve_rate(&pol, &ps).unwrap(), evaluate_solve_rate(&pol, &ps).unwrap());
    }

    #[test]
    fn two_sample_variance_by_hand() {
        // ppl_a = exp(0.5), ppl_b = exp(1.5); variance = (a - b)^2 / 2
        let a = perplexity(&[-0.25, -0.75]);
        let b = perplexity(&[-1.5]);
        let expected = (0.5f64.exp() - 1.5f64.exp()).powi(2) / 2.0;
        assert!((sample_variance(&[a, b]) - expected).abs() < 1e-9);
    }

    #[test]
    fn deterministic_policy_has_no_ppl_variance() {
        let kind = EnvKind::GrammarFill;
        let ps = problems(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = ppl_variance_distribution(&eot_policy(kind), &ps, 4, &SamplingConfig::default(), &mut rng).unwrap();
        assert_eq!(v.len(), ps.len());
        assert!(v.iter().all(|x| *x < 1e-12));
        assert!(ppl_variance_distribution(&eot_policy(kind), &ps, 1, &SamplingConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn ppl_variance_ignores_problem_order() {
        // a problem's variance depends only on its own draws when each is given a fresh stream
        let kind = EnvKind::ArithTarget;
        let ps = problems(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pol = PolicyParams::init(kind.feature_dim(), 12, &mut rng);
        let per = |p: &Problem| {
            let seed = p.id.bytes().map(u64::from).sum::<u64>();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            ppl_variance_distribution(&pol, std::slice::from_ref(p), 8, &SamplingConfig::default(), &mut r).unwrap()[0]
        };
        let forward: Vec<f64> = ps.iter().map(per).collect();
        let mut backward: Vec<f64> = ps.iter().rev().map(per).collect();
        backward.reverse();
        assert_eq!(forward, backward);
        assert!(forward.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn entropy_bounds() {
        let kind = EnvKind::GridPath;
        let ps = problems(kind);
        let s = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = PolicyParams::zeros(kind.feature_dim(), 5);
        let h = policy_entropy(&zero, &ps, 50, &s, &mut rng).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);
        // eot logit 20 above the rest: H = log Z - 20 p_eot, Z = e^20 + 4
        let h = policy_entropy(&eot_policy(kind), &ps, 50, &s, &mut rng).unwrap();
        let z = 20f64.exp() + 4.0;
        let analytic = z.ln() - 20.0 * 20f64.exp() / z;
        assert!((h - analytic).abs() < 1e-9);
        assert!(h < 0.05);
        assert!(policy_entropy(&zero, &ps, 0, &s, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn entropy_never_exceeds_log_v(seed in 0u64..500) {
            let kind = EnvKind::ArithTarget;
            let ps = generate_problems(kind, Tier::Easy, 3, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pol = PolicyParams::zeros(kind.feature_dim(), 12);
            pol.w.as_mut_slice().iter_mut().for_each(|w| *w = rng.gen_range(-3.0..3.0));
            let h = policy_entropy(&pol, &ps, 20, &SamplingConfig::default(), &mut rng).unwrap();
            prop_assert!(h >= 0.0 && h <= 12f64.ln() + 1e-12);
        }
    }

    #[test]
    fn quantiles() {
        let xs = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 5.0);
        assert!((quantile(&xs, 0.1) - 1.4).abs() < 1e-12);
    }

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch: 1,
            mode: "rrl".into(),
            problem_id: Some("p".into()),
            gate_open: false,
            replay_probability: 0.0,
            replayed: false,
            replay_attempts: 0,
            replay_misses: 0,
            replay_successes: 0,
            buffer_occupancy: 0,
            batch_solve_rate: Some(0.25),
            update: Some(UpdateStats {
                policy_loss: 0.1,
                value_loss: 0.3,
                mean_kl: 1e-4,
                clip_fraction: 0.0,
                grad_norm: 0.7,
            }),
            solve_rate: Some(BTreeMap::from([(Tier::Hard, 0.5)])),
            solve_rate_overall: Some(0.5),
            mean_policy_entropy: Some(1.2),
            ppl_variance: Some(PplSummary::from_variances(&[0.1, 0.2])),
        }
    }

    #[test]
    fn metrics_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        export_metrics(&[], &path).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![]);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        export_metrics(&[record(1), record(2)], &path).unwrap();
        export_metrics(&[record(3)], &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![record(1), record(2), record(3)]);
        truncate_metrics(&path, 2).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
        let csv_path = dir.path().join("s.csv");
        write_summary(&back, &csv_path).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), 4);
    }

    #[test]
    fn non_finite_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = record(1);
        r.mean_policy_entropy = Some(f64::NAN);
        assert!(export_metrics(&[r], dir.path().join("m.jsonl")).is_err());
    }
}
