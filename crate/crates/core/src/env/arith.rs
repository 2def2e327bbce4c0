//! Reach a target integer with a `+`/`-` expression over single-digit operands,
//! each listed operand used at most once.

use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_terminal, Generated, Outcome, ProblemMeta, Tier, TokenId, Vocabulary, EOT};

pub(super) static VOCAB: LazyLock<Vocabulary> = LazyLock::new(|| {
    Vocabulary::new(["1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", EOT])
        .expect("static vocabulary")
});

const PLUS: TokenId = 9;
const MINUS: TokenId = 10;
const TERMINAL: TokenId = 11;

/// Remainders in `-REM_EXACT..=REM_EXACT` get their own indicator feature.
const REM_EXACT: i64 = 9;
const VALUE_SCALE: f64 = 50.0;

// flags(3) + value + rem + rem sign(3) + exact rem buckets + 2 overflow buckets
// + digit availability(9) + remaining operand fraction
pub(super) const SUMMARY_DIM: usize = 3 + 1 + 1 + 3 + (2 * REM_EXACT as usize + 1) + 2 + 9 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithMeta {
    pub target: i64,
    /// Operand multiset, digits 1..=9, in prompt order.
    pub operands: Vec<u8>,
}

impl ArithMeta {
    fn counts(&self) -> [u8; 10] {
        let mut c = [0u8; 10];
        for &d in &self.operands {
            c[d as usize] += 1;
        }
        c
    }
}

fn digit_of(token: TokenId) -> Option<i64> {
    (token < PLUS).then_some(token as i64 + 1)
}

/// Incremental left-to-right parse of an expression prefix.
#[derive(Debug, Clone)]
struct ParseState {
    value: i64,
    sign: i64,
    expect_operand: bool,
    used: [u8; 10],
    terms: usize,
    error: Option<&'static str>,
}

impl ParseState {
    fn new() -> Self {
        Self {
            value: 0,
            sign: 1,
            expect_operand: true,
            used: [0; 10],
            terms: 0,
            error: None,
        }
    }

    fn push(&mut self, token: TokenId, counts: &[u8; 10]) {
        if self.error.is_some() {
            return;
        }
        match digit_of(token) {
            Some(d) => {
                if !self.expect_operand {
                    self.error = Some("two operands in a row");
                    return;
                }
                self.used[d as usize] += 1;
                if self.used[d as usize] > counts[d as usize] {
                    self.error = Some("operand not available");
                    return;
                }
                self.value += self.sign * d;
                self.terms += 1;
                self.expect_operand = false;
            }
            None if token == PLUS || token == MINUS => {
                if self.expect_operand {
                    self.error = Some("operator without left operand");
                    return;
                }
                self.sign = if token == PLUS { 1 } else { -1 };
                self.expect_operand = true;
            }
            None => self.error = Some("terminal inside expression"),
        }
    }

    fn run(tokens: &[TokenId], counts: &[u8; 10]) -> Self {
        let mut s = Self::new();
        for &t in tokens {
            s.push(t, counts);
        }
        s
    }
}

pub(super) fn check(meta: &ArithMeta, max_len: usize, tokens: &[TokenId]) -> Outcome {
    let content = match split_terminal(tokens, TERMINAL, max_len) {
        Ok(c) => c,
        Err(outcome) => return outcome,
    };
    if content.is_empty() {
        return Outcome::failed("empty expression");
    }
    let state = ParseState::run(content, &meta.counts());
    if let Some(e) = state.error {
        return Outcome::failed(e);
    }
    if state.expect_operand {
        return Outcome::failed("dangling operator");
    }
    if state.value != meta.target {
        return Outcome::failed(format!("evaluates to {} not {}", state.value, meta.target));
    }
    Outcome::solved()
}

pub(super) fn summary_features(meta: &ArithMeta, prefix: &[TokenId], out: &mut Vec<f64>) {
    let counts = meta.counts();
    let s = ParseState::run(prefix, &counts);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let invalid = s.error.is_some();
    out.push(flag(!invalid && s.expect_operand));
    out.push(flag(!invalid && !s.expect_operand));
    out.push(flag(invalid));

    let rem = meta.target - s.value;
    out.push(s.value as f64 / VALUE_SCALE);
    out.push(rem as f64 / VALUE_SCALE);
    out.push(flag(rem > 0));
    out.push(flag(rem == 0));
    out.push(flag(rem < 0));
    for r in -REM_EXACT..=REM_EXACT {
        out.push(flag(rem == r));
    }
    out.push(flag(rem > REM_EXACT));
    out.push(flag(rem < -REM_EXACT));

    let mut remaining = 0usize;
    for d in 1..=9 {
        let left = counts[d].saturating_sub(s.used[d]);
        remaining += left as usize;
        out.push(flag(left > 0));
    }
    out.push(remaining as f64 / meta.operands.len().max(1) as f64);
}

/// Minimum-term signed decomposition of `target` over the operand multiset.
///
/// Exhaustive dynamic program over (digit, partial sum, has positive term);
/// returns `(sign, digit)` terms or `None` when the target is unreachable.
pub(crate) fn min_term_solution(operands: &[u8], target: i64) -> Option<Vec<(i64, u8)>> {
    let mut counts = [0usize; 10];
    for &d in operands {
        counts[d as usize] += 1;
    }
    let bound: i64 = operands.iter().map(|&d| d as i64).sum();
    if target.abs() > bound {
        return None;
    }
    let width = (2 * bound + 1) as usize;
    let idx = |sum: i64, pos: bool| (sum + bound) as usize * 2 + pos as usize;

    // layers[d][state] = (terms, previous state, plus uses, minus uses)
    type Cell = Option<(usize, usize, usize, usize)>;
    let mut layers: Vec<Vec<Cell>> = Vec::with_capacity(10);
    let mut current: Vec<Cell> = vec![None; width * 2];
    current[idx(0, false)] = Some((0, usize::MAX, 0, 0));
    layers.push(current.clone());
    for d in 1..=9usize {
        let mut next: Vec<Cell> = vec![None; width * 2];
        for (state, cell) in current.iter().enumerate() {
            let Some((terms, ..)) = *cell else { continue };
            let sum = (state / 2) as i64 - bound;
            let pos = state % 2 == 1;
            for p in 0..=counts[d] {
                for q in 0..=counts[d] - p {
                    let s2 = sum + d as i64 * (p as i64 - q as i64);
                    let t2 = terms + p + q;
                    let n = idx(s2, pos || p > 0);
                    if next[n].is_none_or(|(t, ..)| t2 < t) {
                        next[n] = Some((t2, state, p, q));
                    }
                }
            }
        }
        layers.push(next.clone());
        current = next;
    }
    let mut state = idx(target, true);
    current[state]?;
    let mut terms = Vec::new();
    for d in (1..=9usize).rev() {
        let (_, prev, p, q) = layers[d][state].expect("reachable state has a predecessor");
        terms.extend(std::iter::repeat_n((1, d as u8), p));
        terms.extend(std::iter::repeat_n((-1, d as u8), q));
        state = prev;
    }
    Some(terms)
}

fn render_terms(terms: &[(i64, u8)]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(terms.len() * 2);
    for (i, &(sign, d)) in terms.iter().enumerate() {
        if i > 0 {
            out.push(if sign > 0 { PLUS } else { MINUS });
        }
        out.push(d as TokenId - 1);
    }
    out.push(TERMINAL);
    out
}

pub(super) fn generate(tier: Tier, rng: &mut ChaCha8Rng) -> Generated {
    // (operand count, terms in the seeding expression, probability a term is subtracted)
    let (n_range, m_range, minus_p) = match tier {
        Tier::Easy => (3..=5usize, 2..=3usize, 0.3),
        Tier::Medium => (5..=8, 4..=7, 0.2),
        Tier::Hard => (9..=12, 8..=12, 0.0),
    };
    let band = tier.length_band();
    loop {
        let n = rng.gen_range(n_range.clone());
        let operands: Vec<u8> = (0..n).map(|_| rng.gen_range(1..=9u8)).collect();
        let m = rng.gen_range(m_range.clone()).min(n);
        let mut picks: Vec<u8> = operands.clone();
        picks.shuffle(rng);
        let target: i64 = picks[..m]
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if i > 0 && rng.gen_bool(minus_p) {
                    -(d as i64)
                } else {
                    d as i64
                }
            })
            .sum();
        let Some(mut terms) = min_term_solution(&operands, target) else {
            continue;
        };
        let content = 2 * terms.len() - 1;
        if !band.contains(&content) || terms.len() < 2 {
            continue;
        }
        terms.shuffle(rng);
        // an expression has to open with a positive term
        let first = terms.iter().position(|t| t.0 > 0).expect("has positive term");
        terms.swap(0, first);

        let mut prompt = vec!["target".to_string(), target.to_string(), "operands".to_string()];
        prompt.extend(operands.iter().map(u8::to_string));
        return Generated {
            prompt,
            canonical: render_terms(&terms),
            max_len: 2 * n,
            meta: ProblemMeta::Arith(ArithMeta { target, operands }),
        };
    }
}
