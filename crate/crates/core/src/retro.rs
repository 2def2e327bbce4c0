//! Retrospective replay: promising-state extraction, bounded per-problem
//! buffers with visit counters, counter-weighted selection, the replay
//! schedule, and the critic-stability gate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{featurize, Problem, TokenId, Vocabulary};
use crate::error::{RrlError, Result};
use crate::model::{state_value, ValueParams};

pub const BUFFER_CAPACITY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    PolicyGenerated,
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub problem_id: String,
    /// Solution prefix, prompt excluded.
    pub state: Vec<TokenId>,
    pub origin: Origin,
    pub value_at_insert: f64,
    pub counter: u64,
    pub inserted_step: u64,
}

impl BufferEntry {
    fn same_key(&self, other: &BufferEntry) -> bool {
        self.problem_id == other.problem_id && self.origin == other.origin && self.state == other.state
    }
}

/// Highest-value proper prefix `y[..i]`, `1 <= i < len(y)`; ties go to the
/// shortest prefix. `None` when the solution has fewer than two tokens.
pub fn extract_promising_state(
    problem: &Problem,
    solution: &[TokenId],
    vparams: &ValueParams,
    origin: Origin,
    step: u64,
) -> Result<Option<BufferEntry>> {
    if solution.len() < 2 {
        return Ok(None);
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 1..solution.len() {
        let v = state_value(vparams, &featurize(problem, &solution[..i])?)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (len, value) = best.expect("at least one candidate prefix");
    Ok(Some(BufferEntry {
        problem_id: problem.id.clone(),
        state: solution[..len].to_vec(),
        origin,
        value_at_insert: value,
        counter: 0,
        inserted_step: step,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertReport {
    Inserted { evicted: Option<BufferEntry> },
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    known: BTreeSet<String>,
    entries: BTreeMap<String, Vec<BufferEntry>>,
}

impl ReplayBuffer {
    pub fn new<S: Into<String>>(problem_ids: impl IntoIterator<Item = S>) -> Self {
        Self {
            capacity: BUFFER_CAPACITY,
            known: problem_ids.into_iter().map(Into::into).collect(),
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries_for(&self, problem_id: &str) -> &[BufferEntry] {
        self.entries.get(problem_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dedupes on (problem, state, origin). At capacity, first evicts the
    /// entry with the highest counter, oldest insertion on ties.
    pub fn insert(&mut self, entry: BufferEntry) -> Result<InsertReport> {
        if !self.known.contains(&entry.problem_id) {
            return Err(RrlError::InvalidArgument(format!(
                "unknown problem `{}`",
                entry.problem_id
            )));
        }
        if entry.state.is_empty() {
            return Err(RrlError::InvalidArgument("empty replay state".into()));
        }
        let list = self.entries.entry(entry.problem_id.clone()).or_default();
        if list.iter().any(|e| e.same_key(&entry)) {
            return Ok(InsertReport::Duplicate);
        }
        let evicted = if list.len() >= self.capacity {
            let victim = (0..list.len())
                .max_by(|&a, &b| {
                    list[a]
                        .counter
                        .cmp(&list[b].counter)
                        .then(list[b].inserted_step.cmp(&list[a].inserted_step))
                        .then(b.cmp(&a))
                })
                .expect("non-empty list");
            Some(list.remove(victim))
        } else {
            None
        };
        list.push(BufferEntry { counter: 0, ..entry });
        Ok(InsertReport::Inserted { evicted })
    }

    /// Draws an entry for the problem with probability ∝ 1 / (1 + counter).
    pub fn select<R: Rng + ?Sized>(&self, problem_id: &str, rng: &mut R) -> Option<BufferEntry> {
        let list = self.entries_for(problem_id);
        if list.is_empty() {
            return None;
        }
        let weights: Vec<f64> = list.iter().map(|e| 1.0 / (1.0 + e.counter as f64)).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (e, w) in list.iter().zip(&weights) {
            if u < *w {
                return Some(e.clone());
            }
            u -= w;
        }
        list.last().cloned()
    }

    /// Increments the entry's counter and removes it when the replay solved
    /// the problem.
    pub fn record_outcome(&mut self, entry: &BufferEntry, solved: bool) -> Result<()> {
        let missing = || RrlError::EntryNotFound {
            problem_id: entry.problem_id.clone(),
            state: entry.state.clone(),
        };
        let list = self.entries.get_mut(&entry.problem_id).ok_or_else(missing)?;
        let pos = list.iter().position(|e| e.same_key(entry)).ok_or_else(missing)?;
        list[pos].counter += 1;
        if solved {
            list.remove(pos);
        }
        Ok(())
    }

    /// Appends one JSON line per entry, tagged with the training step.
    pub fn export_snapshot(&self, path: impl AsRef<Path>, step: u64, vocab: &Vocabulary) -> Result<()> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RrlError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in self.iter() {
            let record = SnapshotRecord {
                step,
                problem_id: e.problem_id.clone(),
                state: vocab.decode(&e.state),
                origin: e.origin,
                value_at_insert: e.value_at_insert,
                counter: e.counter,
            };
            let line = serde_json::to_string(&record).expect("snapshot serializes");
            writeln!(w, "{line}").map_err(|e| RrlError::io(path, e))?;
        }
        w.flush().map_err(|e| RrlError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: u64,
    pub problem_id: String,
    pub state: Vec<String>,
    pub origin: Origin,
    pub value_at_insert: f64,
    pub counter: u64,
}

pub fn insert_entry(buffer: &mut ReplayBuffer, entry: BufferEntry) -> Result<InsertReport> {
    buffer.insert(entry)
}

pub fn select_replay_state<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    problem_id: &str,
    rng: &mut R,
) -> Option<BufferEntry> {
    buffer.select(problem_id, rng)
}

pub fn record_replay_outcome(buffer: &mut ReplayBuffer, entry: &BufferEntry, solved: bool) -> Result<()> {
    buffer.record_outcome(entry, solved)
}

/// Probability of starting a step from a buffered state: ramps linearly
/// through the first epoch, then stays at `beta`.
pub fn replay_probability(epoch: u64, step_in_epoch: u64, steps_per_epoch: u64, beta: f64) -> f64 {
    if epoch == 1 {
        beta * (step_in_epoch as f64 / steps_per_epoch as f64)
    } else {
        beta
    }
}

/// Whether the critic loss has settled: the means of the last two windows
/// differ by less than `rel_tol` (relative), or warmup has run out.
pub fn replay_gate(history: &[f64], window: usize, rel_tol: f64, max_warmup_steps: usize) -> bool {
    if history.len() >= max_warmup_steps {
        return true;
    }
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&history[n - window..]);
    let prev = mean(&history[n - 2 * window..n - window]);
    (last - prev).abs() / prev.max(1e-8) < rel_tol
}

/// Latched [`replay_gate`]: once open it stays open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayGate {
    pub window: usize,
    pub rel_tol: f64,
    pub max_warmup_steps: usize,
    open: bool,
}

impl ReplayGate {
    pub fn new(window: usize, rel_tol: f64, max_warmup_steps: usize) -> Self {
        Self {
            window,
            rel_tol,
            max_warmup_steps,
            open: false,
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn update(&mut self, history: &[f64]) -> bool {
        self.open = self.open || replay_gate(history, self.window, self.rel_tol, self.max_warmup_steps);
        self.open
    }
}
