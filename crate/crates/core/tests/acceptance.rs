//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when an asserted criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use rrl_core::config::{Mode, RunConfig};
use rrl_core::env::{generate_problems, EnvKind, Problem, Tier, TokenId};
use rrl_core::estimate::{compute_gae, GaeConfig};
use rrl_core::experiment::{run_compare, run_sweep, CompareReport, RunResult, DEFAULT_BETAS};
use rrl_core::model::{
    clone_reference, log_prob, log_prob_and_grad, Matrix, PolicyParams, SamplingConfig, ValueParams,
};
use rrl_core::optimize::{ppo_loss, ppo_objective_and_grad, ppo_update, PpoConfig};
use rrl_core::retro::{replay_probability, BufferEntry, InsertReport, Origin, ReplayBuffer, SnapshotRecord};
use rrl_core::rollout::{rollout_from, Trajectory};
use rrl_core::trainer::{train_run, train_run_with, TrainOptions, BUFFER_FILE, FINAL_PARAMS_FILE, METRICS_FILE};

/// Criteria whose outcome is printed but not asserted.
const REPORTED_ONLY: &[u32] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- fixtures

fn random_policy(kind: EnvKind, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::zeros(kind.feature_dim(), kind.vocabulary().size());
    p.w.as_mut_slice().iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    p
}

fn random_value(kind: EnvKind, scale: f64, rng: &mut ChaCha8Rng) -> ValueParams {
    let mut v = ValueParams::zeros(kind.feature_dim());
    v.w.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    v
}

fn random_tier(rng: &mut ChaCha8Rng) -> Tier {
    [Tier::Easy, Tier::Medium, Tier::Hard][rng.gen_range(0..3)]
}

/// A shaped batch on one problem, half of it replayed from canonical prefixes.
fn random_batch(
    problem: &Problem,
    policy: &PolicyParams,
    vparams: &ValueParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Trajectory> {
    let reference = clone_reference(&random_policy(problem.env_kind, 0.3, rng));
    let sampling = SamplingConfig::default();
    let kl = rng.gen_range(0.0..0.1);
    (0..rng.gen_range(1..=3))
        .map(|i| {
            let k = if i % 2 == 1 { rng.gen_range(1..problem.canonical.len()) } else { 0 };
            let mut t = rollout_from(problem, &problem.canonical[..k], policy, &reference, vparams, &sampling, rng)
                .expect("rollout");
            t.shape(kl);
            t
        })
        .collect()
}

// ------------------------------------------------------- 1. gradients

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn shifted_policy(p: &PolicyParams, d: &[f64], h: f64) -> PolicyParams {
    let mut q = p.clone();
    q.w.as_mut_slice().iter_mut().zip(d).for_each(|(w, x)| *w += h * x);
    q
}

fn shifted_value(v: &ValueParams, d: &[f64], h: f64) -> ValueParams {
    let mut q = v.clone();
    q.w.iter_mut().zip(d).for_each(|(w, x)| *w += h * x);
    q
}

fn objective(batch: &[Trajectory], p: &PolicyParams, v: &ValueParams, cfg: &PpoConfig) -> f64 {
    let (pl, vl) = ppo_loss(batch, p, v, cfg, &GaeConfig::default()).expect("loss");
    pl + cfg.value_loss_coeff * vl
}

/// Moves stored behavior log-probs off the current policy so some ratios are
/// clipped, keeping every ratio away from the clip boundaries.
fn perturb_old_logps(batch: &mut [Trajectory], policy: &PolicyParams, eps: f64, rng: &mut ChaCha8Rng) {
    for t in batch.iter_mut() {
        let actions: Vec<TokenId> = t.actions().to_vec();
        for (k, &a) in actions.iter().enumerate() {
            let now = log_prob(policy, &t.features[k], a).unwrap();
            let old = now + rng.gen_range(-0.4..0.4);
            let ratio = (now - old).exp();
            let near = (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3;
            t.logp_policy[k] = if near { now } else { old };
        }
    }
}

fn criterion_gradients() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const INSTANCES: usize = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for i in 0..INSTANCES {
        let kind = EnvKind::ALL[i % 3];
        let problem = generate_problems(kind, random_tier(&mut rng), 1, rng.gen()).unwrap().remove(0);
        let policy = random_policy(kind, 0.5, &mut rng);
        let vparams = random_value(kind, 0.5, &mut rng);
        let cfg = PpoConfig {
            clip_eps: rng.gen_range(0.1..0.3),
            value_loss_coeff: rng.gen_range(0.1..1.0),
            normalize_advantages: rng.gen(),
            ..PpoConfig::default()
        };
        let mut batch = random_batch(&problem, &policy, &vparams, &mut rng);
        perturb_old_logps(&mut batch, &policy, cfg.clip_eps, &mut rng);

        let (_, gp, gv) = ppo_objective_and_grad(&batch, &policy, &vparams, &cfg, &GaeConfig::default()).unwrap();
        let np = policy.w.as_slice().len();
        let nv = vparams.w.len();
        for (use_p, use_v) in [(true, false), (false, true), (true, true)] {
            let dp = if use_p { random_direction(np, &mut rng) } else { vec![0.0; np] };
            let dv = if use_v { random_direction(nv, &mut rng) } else { vec![0.0; nv] };
            let analytic = dot(gp.as_slice(), &dp) + dot(&gv, &dv);
            let plus = objective(&batch, &shifted_policy(&policy, &dp, H), &shifted_value(&vparams, &dv, H), &cfg);
            let minus = objective(&batch, &shifted_policy(&policy, &dp, -H), &shifted_value(&vparams, &dv, -H), &cfg);
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * H)));
            checks += 1;
        }

        // per-token log-probability gradient
        let t = &batch[0];
        let a = t.actions()[0];
        let f = &t.features[0];
        let (_, g): (f64, Matrix) = log_prob_and_grad(&policy, f, a).unwrap();
        let d = random_direction(np, &mut rng);
        let numeric = (log_prob(&shifted_policy(&policy, &d, H), f, a).unwrap()
            - log_prob(&shifted_policy(&policy, &d, -H), f, a).unwrap())
            / (2.0 * H);
        worst = worst.max(rel_err(dot(g.as_slice(), &d), numeric));
        checks += 1;
    }
    outcome(
        worst < TOL,
        format!("{INSTANCES} instances, {checks} directional checks, max rel err {worst:.2e} (tol {TOL:.0e})"),
    )
}

// ------------------------------------------------------------ 2. GAE

fn gae_double_sum(r: &[f64], v: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let value = |k: usize| if k < n { v[k] } else { 0.0 };
    (0..n)
        .map(|t| {
            (0..n - t)
                .map(|l| {
                    let delta = r[t + l] + gamma * value(t + l + 1) - value(t + l);
                    (gamma * lam).powi(l as i32) * delta
                })
                .sum()
        })
        .collect()
}

fn criterion_gae() -> Outcome {
    const INSTANCES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for len in 1..=6 {
        for _ in 0..INSTANCES {
            let cfg = GaeConfig {
                gamma: rng.gen_range(0.0..=1.0),
                lam: rng.gen_range(0.0..=1.0),
            };
            let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (adv, ret) = compute_gae(&r, &v, &cfg).unwrap();
            let brute = gae_double_sum(&r, &v, cfg.gamma, cfg.lam);
            for t in 0..len {
                worst = worst.max((adv[t] - brute[t]).abs());
                worst = worst.max((ret[t] - (brute[t] + v[t])).abs());
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("T = 1..6, {INSTANCES} instances each, max abs err {worst:.2e}"),
    )
}

// ------------------------------------------------------- 3. schedule

fn criterion_schedule() -> Outcome {
    let steps_per_epoch = 300u64;
    let mut points = 0usize;
    let mut mismatches = 0usize;
    for epoch in 1..=3u64 {
        for step in 0..=steps_per_epoch {
            for beta in DEFAULT_BETAS {
                let expected = if epoch == 1 {
                    beta * (step as f64 / steps_per_epoch as f64)
                } else {
                    beta
                };
                let got = replay_probability(epoch, step, steps_per_epoch, beta);
                if got.to_bits() != expected.to_bits() {
                    mismatches += 1;
                }
                points += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{points} grid points, {mismatches} bit mismatches"))
}

// ------------------------------------------------- 4. buffer properties

#[derive(Debug, Clone, PartialEq)]
struct ModelEntry {
    state: Vec<TokenId>,
    origin: Origin,
    counter: u64,
    inserted_step: u64,
}

/// Reference buffer semantics, one list per problem in insertion order.
#[derive(Default)]
struct ModelBuffer {
    lists: BTreeMap<String, Vec<ModelEntry>>,
}

impl ModelBuffer {
    fn insert(&mut self, pid: &str, state: &[TokenId], origin: Origin, step: u64) -> Option<Option<ModelEntry>> {
        let list = self.lists.entry(pid.to_string()).or_default();
        if list.iter().any(|e| e.state == state && e.origin == origin) {
            return None;
        }
        let mut evicted = None;
        if list.len() == 5 {
            let max = list.iter().map(|e| e.counter).max().unwrap();
            let oldest = list
                .iter()
                .enumerate()
                .filter(|(_, e)| e.counter == max)
                .min_by_key(|(i, e)| (e.inserted_step, *i))
                .map(|(i, _)| i)
                .unwrap();
            evicted = Some(list.remove(oldest));
        }
        list.push(ModelEntry {
            state: state.to_vec(),
            origin,
            counter: 0,
            inserted_step: step,
        });
        Some(evicted)
    }

    fn record(&mut self, pid: &str, state: &[TokenId], origin: Origin, solved: bool) -> bool {
        let Some(list) = self.lists.get_mut(pid) else { return false };
        let Some(i) = list.iter().position(|e| e.state == state && e.origin == origin) else {
            return false;
        };
        list[i].counter += 1;
        if solved {
            list.remove(i);
        }
        true
    }

    fn view(&self, pid: &str) -> Vec<ModelEntry> {
        self.lists.get(pid).cloned().unwrap_or_default()
    }
}

fn view(buffer: &ReplayBuffer, pid: &str) -> Vec<ModelEntry> {
    buffer
        .entries_for(pid)
        .iter()
        .map(|e| ModelEntry {
            state: e.state.clone(),
            origin: e.origin,
            counter: e.counter,
            inserted_step: e.inserted_step,
        })
        .collect()
}

fn entry(pid: &str, state: Vec<TokenId>, origin: Origin, step: u64, counter: u64) -> BufferEntry {
    BufferEntry {
        problem_id: pid.to_string(),
        state,
        origin,
        value_at_insert: 0.0,
        counter,
        inserted_step: step,
    }
}

fn criterion_buffer() -> Outcome {
    const OPS: usize = 10_000;
    let pids = ["p0", "p1", "p2"];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut buffer = ReplayBuffer::new(pids);
    let mut model = ModelBuffer::default();
    let mut counters: BTreeMap<(String, Vec<TokenId>, Origin), u64> = BTreeMap::new();
    let mut violations: Vec<String> = Vec::new();
    let (mut evictions, mut solved_exits, mut dupes) = (0, 0, 0);
    let random_state = |rng: &mut ChaCha8Rng| -> Vec<TokenId> { (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..3)).collect() };
    let random_origin = |rng: &mut ChaCha8Rng| if rng.gen() { Origin::Canonical } else { Origin::PolicyGenerated };

    for step in 0..OPS as u64 {
        let pid = pids[rng.gen_range(0..pids.len())];
        let roll: f64 = rng.gen();
        if roll < 0.5 {
            let state = random_state(&mut rng);
            let origin = random_origin(&mut rng);
            let got = buffer
                .insert(entry(pid, state.clone(), origin, step, rng.gen_range(0..9)))
                .unwrap();
            let want = model.insert(pid, &state, origin, step);
            match (&got, &want) {
                (InsertReport::Duplicate, None) => dupes += 1,
                (InsertReport::Inserted { evicted }, Some(expected)) => {
                    let got_ev = evicted.as_ref().map(|e| (e.state.clone(), e.origin, e.counter));
                    let want_ev = expected.as_ref().map(|e| (e.state.clone(), e.origin, e.counter));
                    if got_ev != want_ev {
                        violations.push(format!("op {step}: evicted {got_ev:?}, expected {want_ev:?}"));
                    }
                    if let Some(e) = expected {
                        counters.remove(&(pid.to_string(), e.state.clone(), e.origin));
                        evictions += 1;
                    }
                    counters.insert((pid.to_string(), state, origin), 0);
                }
                _ => violations.push(format!("op {step}: insert report {got:?}, expected {want:?}")),
            }
        } else if roll < 0.9 {
            let picked = buffer.select(pid, &mut rng);
            let list = model.view(pid);
            match picked {
                None if list.is_empty() => {}
                None => violations.push(format!("op {step}: select returned nothing from {} entries", list.len())),
                Some(e) => {
                    if !list.iter().any(|m| m.state == e.state && m.origin == e.origin) {
                        violations.push(format!("op {step}: selected an absent state"));
                    }
                    let solved = rng.gen_bool(0.3);
                    buffer.record_outcome(&e, solved).unwrap();
                    model.record(pid, &e.state, e.origin, solved);
                    let key = (pid.to_string(), e.state.clone(), e.origin);
                    if solved {
                        counters.remove(&key);
                        solved_exits += 1;
                        if buffer.entries_for(pid).iter().any(|x| x.state == e.state && x.origin == e.origin) {
                            violations.push(format!("op {step}: solved state still buffered"));
                        }
                    }
                }
            }
        } else {
            let state = random_state(&mut rng);
            let origin = random_origin(&mut rng);
            let present = model.record(pid, &state, origin, false);
            let got = buffer.record_outcome(&entry(pid, state, origin, 0, 0), false);
            if got.is_ok() != present {
                violations.push(format!("op {step}: record on absent={} returned {got:?}", !present));
            }
        }

        for p in pids {
            let actual = view(&buffer, p);
            if actual.len() > 5 {
                violations.push(format!("op {step}: {p} holds {} entries", actual.len()));
            }
            for (i, a) in actual.iter().enumerate() {
                if actual[..i].iter().any(|b| b.state == a.state && b.origin == a.origin) {
                    violations.push(format!("op {step}: duplicate key in {p}"));
                }
                let key = (p.to_string(), a.state.clone(), a.origin);
                if let Some(prev) = counters.insert(key, a.counter) {
                    if a.counter < prev {
                        violations.push(format!("op {step}: counter decreased {prev} -> {}", a.counter));
                    }
                }
            }
            if actual != model.view(p) {
                violations.push(format!("op {step}: {p} diverged from the reference model"));
            }
        }
        if violations.len() > 5 {
            break;
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{OPS} ops ({evictions} evictions, {solved_exits} solved exits, {dupes} duplicates), {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(": {v}")).unwrap_or_default()
        ),
    )
}

// -------------------------------------------------------- 5. masking

fn criterion_masking() -> Outcome {
    const INSTANCES: usize = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut identical = 0usize;
    for i in 0..INSTANCES {
        let kind = EnvKind::ALL[i % 3];
        let problem = generate_problems(kind, random_tier(&mut rng), 1, rng.gen()).unwrap().remove(0);
        let policy = random_policy(kind, 0.5, &mut rng);
        let vparams = random_value(kind, 0.5, &mut rng);
        let reference = clone_reference(&policy);
        let k = rng.gen_range(1..problem.canonical.len());
        let mut replayed = rollout_from(
            &problem,
            &problem.canonical[..k],
            &policy,
            &reference,
            &vparams,
            &SamplingConfig::default(),
            &mut rng,
        )
        .unwrap();
        replayed.shape(0.01);
        let mut batch = random_batch(&problem, &policy, &vparams, &mut rng);
        batch.push(replayed);
        let mut altered = batch.clone();
        let last = altered.last_mut().unwrap();
        let eot = problem.vocabulary().eot();
        let size = problem.vocabulary().size() as TokenId;
        for tok in &mut last.tokens[..k] {
            let mut t = rng.gen_range(0..size);
            while t == eot || t == *tok {
                t = rng.gen_range(0..size);
            }
            *tok = t;
        }

        let cfg = PpoConfig::default();
        let gae = GaeConfig::default();
        let a = ppo_loss(&batch, &policy, &vparams, &cfg, &gae).unwrap();
        let b = ppo_loss(&altered, &policy, &vparams, &cfg, &gae).unwrap();
        let same_loss = a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits();

        let update = |batch: &[Trajectory]| {
            let (mut p, mut v) = (policy.clone(), vparams.clone());
            let mut r = ChaCha8Rng::seed_from_u64(i as u64);
            ppo_update(batch, &mut p, &mut v, &cfg, &gae, &mut r).unwrap();
            (p, v)
        };
        let (pa, va) = update(&batch);
        let (pb, vb) = update(&altered);
        let bits = |m: &[f64]| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same_update = bits(pa.w.as_slice()) == bits(pb.w.as_slice()) && bits(&va.w) == bits(&vb.w);
        if same_loss && same_update {
            identical += 1;
        }
    }
    outcome(
        identical == INSTANCES,
        format!("{identical}/{INSTANCES} replayed batches give bit-identical loss and update after prefix rewrite"),
    )
}

// ---------------------------------------------------- 6. selection weights

fn criterion_selection() -> Outcome {
    const DRAWS: usize = 100_000;
    let counters = [0u64, 1, 2, 4, 9];
    let mut buffer = ReplayBuffer::new(["p"]);
    for (i, &c) in counters.iter().enumerate() {
        let e = entry("p", vec![i as TokenId], Origin::Canonical, i as u64, 0);
        buffer.insert(e.clone()).unwrap();
        for _ in 0..c {
            buffer.record_outcome(&e, false).unwrap();
        }
    }
    let mut hits = [0usize; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..DRAWS {
        let e = buffer.select("p", &mut rng).unwrap();
        hits[e.state[0] as usize] += 1;
    }
    let weights: Vec<f64> = counters.iter().map(|&c| 1.0 / (1.0 + c as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut worst_z = 0.0f64;
    for (h, w) in hits.iter().zip(&weights) {
        let p = w / total;
        let se = (p * (1.0 - p) / DRAWS as f64).sqrt();
        worst_z = worst_z.max((*h as f64 / DRAWS as f64 - p).abs() / se);
    }
    outcome(
        worst_z < 3.0,
        format!("{DRAWS} draws over counters {counters:?}, max |z| = {worst_z:.2} (limit 3)"),
    )
}

// ------------------------------------------------- 7, 8, 9 from compare

fn criterion_directional(report: &CompareReport, elapsed: Duration, seeds: usize) -> Outcome {
    let s = &report.sign_test;
    let majority = s.wins * 2 > seeds;
    let pass = majority && s.p_value < 0.05 && report.mean_improvement >= 0.03;
    outcome(
        pass,
        format!(
            "rrl beats vanilla_ppo in {}/{} pairs ({} ties), sign test p = {:.4}, mean improvement {:+.2} pp; \
             {:.1} s per paired seed (all four modes)",
            s.wins,
            seeds,
            s.ties,
            s.p_value,
            100.0 * report.mean_improvement,
            secs(elapsed) / seeds as f64
        ),
    )
}

fn criterion_collapse(report: &CompareReport) -> Outcome {
    let vanilla: Vec<&RunResult> = report.runs.iter().filter(|r| r.mode == Mode::VanillaPpo).collect();
    let collapsed = vanilla
        .iter()
        .filter(|r| r.final_entropy < r.initial_entropy && r.final_ppl_variance < r.initial_ppl_variance)
        .count();
    outcome(
        collapsed >= 8,
        format!("entropy and PPL variance both fall in {collapsed}/{} vanilla_ppo seeds (need 8)", vanilla.len()),
    )
}

fn read_snapshots(dir: &Path) -> Vec<SnapshotRecord> {
    fs::read_to_string(dir.join(BUFFER_FILE))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).expect("snapshot line"))
        .collect()
}

fn criterion_ablation(report: &CompareReport) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for (mode, allowed) in [
        (Mode::CsOnly, Some(Origin::Canonical)),
        (Mode::PgsOnly, Some(Origin::PolicyGenerated)),
        (Mode::VanillaPpo, None),
    ] {
        let records: Vec<SnapshotRecord> = report
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .flat_map(|r| read_snapshots(&r.output_dir))
            .collect();
        let foreign = records.iter().filter(|r| Some(r.origin) != allowed).count();
        let ok = match allowed {
            Some(_) => foreign == 0 && !records.is_empty(),
            None => records.is_empty(),
        };
        pass &= ok;
        detail.push(format!("{mode}: {} entries, {foreign} of foreign origin", records.len()));
    }
    let order: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.mode, r.overall.0))
        .collect();
    outcome(pass, format!("{}; mean final solve rate {}", detail.join("; "), order.join(", ")))
}

// --------------------------------------------------- 10. determinism

fn criterion_determinism(root: &Path) -> Outcome {
    let base = RunConfig::default();
    let run_in = |name: &str| {
        let mut c = base.clone();
        c.output_dir = root.join(name);
        c
    };
    let (a, b, c) = (run_in("a"), run_in("b"), run_in("c"));
    train_run(&a).unwrap();
    train_run(&b).unwrap();
    let stop = 137;
    let interrupted = train_run_with(&c, &TrainOptions { resume: false, stop_after: Some(stop) }).unwrap();
    let resumed = train_run_with(&c, &TrainOptions { resume: true, stop_after: None }).unwrap();
    let bytes = |c: &RunConfig, f: &str| fs::read(c.output_dir.join(f)).unwrap();
    let repeat = bytes(&a, METRICS_FILE) == bytes(&b, METRICS_FILE);
    let resume = [METRICS_FILE, FINAL_PARAMS_FILE, BUFFER_FILE]
        .iter()
        .all(|f| bytes(&a, f) == bytes(&c, f));
    outcome(
        repeat && resume && interrupted.steps_completed == stop && resumed.steps_completed == base.total_steps(),
        format!(
            "repeat run metrics byte-identical: {repeat}; resume after interruption at step {stop} matches \
             metrics, params and buffer snapshots: {resume}"
        ),
    )
}

// --------------------------------------------------------- 11. sweep

fn metrics_without_mode(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("mode");
            }
            v
        })
        .collect()
}

fn criterion_sweep(root: &Path, compare: &CompareReport, seeds: usize) -> Outcome {
    let mut base = RunConfig::default();
    base.output_dir = root.to_path_buf();
    let report = match run_sweep(&base, &DEFAULT_BETAS, seeds, true) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let complete = report.rows.len() == DEFAULT_BETAS.len() && report.rows.iter().all(|r| r.runs == seeds);
    let mut matched = 0;
    for run in report.runs.iter().filter(|r| r.replay_beta == 0.0) {
        let vanilla = compare
            .runs
            .iter()
            .find(|r| r.mode == Mode::VanillaPpo && r.seed == run.seed)
            .expect("vanilla run for shared seed");
        let same_metrics = metrics_without_mode(&run.output_dir) == metrics_without_mode(&vanilla.output_dir);
        let same_params = fs::read(run.output_dir.join(FINAL_PARAMS_FILE)).unwrap()
            == fs::read(vanilla.output_dir.join(FINAL_PARAMS_FILE)).unwrap();
        if same_metrics && same_params {
            matched += 1;
        }
    }
    let best = report
        .rows
        .iter()
        .max_by(|a, b| a.mean_overall.total_cmp(&b.mean_overall))
        .unwrap();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}: {:.3}", r.replay_beta, r.mean_overall))
        .collect();
    outcome(
        complete && matched == seeds,
        format!(
            "{} beta rows; beta = 0 matches vanilla_ppo for {matched}/{seeds} shared seeds; \
             best beta {} ({}); 0.1 optimal: {}",
            report.rows.len(),
            best.replay_beta,
            rows.join(", "),
            best.replay_beta == 0.1
        ),
    )
}

// -------------------------------------------------------------- driver

fn report(id: u32, name: &str, started: Instant, limit: Option<f64>, o: Outcome, failed: &mut Vec<u32>) {
    let elapsed = secs(started.elapsed());
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = o.pass && in_time;
    let timing = match limit {
        Some(l) => format!("{elapsed:.2} s, limit {l} s"),
        None => format!("{elapsed:.1} s"),
    };
    let tag = if pass { "PASS" } else { "FAIL" };
    let note = if !pass && REPORTED_ONLY.contains(&id) { " [reported, not asserted]" } else { "" };
    println!("criterion {id:>2} {name}: {tag}{note} ({}; {timing})", o.detail);
    if !pass && !REPORTED_ONLY.contains(&id) {
        failed.push(id);
    }
}

fn main() -> ExitCode {
    let mut failed = Vec::new();
    let t = Instant::now();
    report(1, "gradient correctness", t, Some(10.0), criterion_gradients(), &mut failed);
    let t = Instant::now();
    report(2, "GAE oracle equivalence", t, Some(5.0), criterion_gae(), &mut failed);
    let t = Instant::now();
    report(3, "schedule exactness", t, Some(1.0), criterion_schedule(), &mut failed);
    let t = Instant::now();
    report(4, "buffer properties", t, Some(5.0), criterion_buffer(), &mut failed);
    let t = Instant::now();
    report(5, "loss masking", t, None, criterion_masking(), &mut failed);
    let t = Instant::now();
    report(6, "selection weights", t, None, criterion_selection(), &mut failed);

    let root = tempfile::tempdir().expect("temp dir");
    const SEEDS: usize = 10;
    let mut base = RunConfig::default();
    base.output_dir = root.path().join("compare");
    let t = Instant::now();
    let compare = run_compare(&base, SEEDS, true).expect("compare runs");
    let compare_time = t.elapsed();
    report(7, "directional end-to-end", t, None, criterion_directional(&compare, compare_time, SEEDS), &mut failed);
    let t = Instant::now();
    report(8, "exploration collapse", t, None, criterion_collapse(&compare), &mut failed);
    let t = Instant::now();
    report(9, "ablation buffer origins", t, None, criterion_ablation(&compare), &mut failed);
    let t = Instant::now();
    report(10, "determinism", t, None, criterion_determinism(&root.path().join("determinism")), &mut failed);
    let t = Instant::now();
    report(11, "sensitivity sweep", t, None, criterion_sweep(&root.path().join("sweep"), &compare, 2), &mut failed);

    if failed.is_empty() {
        println!("acceptance: all asserted criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
