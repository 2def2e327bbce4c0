//! Fill a bracket template: a balanced string with a fixed number of bracket
//! pairs, bounded nesting depth, and exact counts of `a` and `b` symbols where
//! every `b` sits inside at least one bracket pair.

use std::sync::LazyLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_terminal, Generated, Outcome, ProblemMeta, Tier, TokenId, Vocabulary, EOT};

pub(super) static VOCAB: LazyLock<Vocabulary> =
    LazyLock::new(|| Vocabulary::new(["(", ")", "a", "b", EOT]).expect("static vocabulary"));

const OPEN: TokenId = 0;
const CLOSE: TokenId = 1;
const SYM_A: TokenId = 2;
const SYM_B: TokenId = 3;
const TERMINAL: TokenId = 4;

const COUNT_SCALE: f64 = 10.0;
const LENGTH_SCALE: f64 = 30.0;

pub(super) const SUMMARY_DIM: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarMeta {
    pub pairs: u8,
    pub a_count: u8,
    pub b_count: u8,
    pub max_depth: u8,
}

#[derive(Debug, Default)]
struct Counters {
    depth: u32,
    opens: u32,
    a: u32,
    b: u32,
    error: Option<&'static str>,
}

fn scan(meta: &GrammarMeta, tokens: &[TokenId]) -> Counters {
    let mut s = Counters::default();
    for &t in tokens {
        if s.error.is_some() {
            break;
        }
        match t {
            OPEN => {
                s.opens += 1;
                s.depth += 1;
                if s.opens > meta.pairs as u32 {
                    s.error = Some("too many pairs");
                } else if s.depth > meta.max_depth as u32 {
                    s.error = Some("nesting too deep");
                }
            }
            CLOSE => {
                if s.depth == 0 {
                    s.error = Some("unmatched close");
                } else {
                    s.depth -= 1;
                }
            }
            SYM_A => {
                s.a += 1;
                if s.a > meta.a_count as u32 {
                    s.error = Some("too many a");
                }
            }
            SYM_B => {
                s.b += 1;
                if s.depth == 0 {
                    s.error = Some("b outside brackets");
                } else if s.b > meta.b_count as u32 {
                    s.error = Some("too many b");
                }
            }
            _ => s.error = Some("terminal inside string"),
        }
    }
    s
}

pub(super) fn check(meta: &GrammarMeta, max_len: usize, tokens: &[TokenId]) -> Outcome {
    let content = match split_terminal(tokens, TERMINAL, max_len) {
        Ok(c) => c,
        Err(outcome) => return outcome,
    };
    let s = scan(meta, content);
    if let Some(e) = s.error {
        return Outcome::failed(e);
    }
    if s.depth != 0 {
        return Outcome::failed("unclosed bracket");
    }
    if s.opens != meta.pairs as u32 || s.a != meta.a_count as u32 || s.b != meta.b_count as u32 {
        return Outcome::failed("counts not satisfied");
    }
    Outcome::solved()
}

pub(super) fn summary_features(meta: &GrammarMeta, prefix: &[TokenId], out: &mut Vec<f64>) {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let s = scan(meta, prefix);
    let open_left = (meta.pairs as u32).saturating_sub(s.opens);
    let a_left = (meta.a_count as u32).saturating_sub(s.a);
    let b_left = (meta.b_count as u32).saturating_sub(s.b);
    let needed = 2 * open_left + s.depth + a_left + b_left;
    out.extend([
        s.depth as f64 / meta.max_depth.max(1) as f64,
        flag(s.depth == 0),
        flag(s.depth >= meta.max_depth as u32),
        open_left as f64 / COUNT_SCALE,
        flag(open_left > 0),
        s.depth as f64 / COUNT_SCALE,
        a_left as f64 / COUNT_SCALE,
        flag(a_left > 0),
        b_left as f64 / COUNT_SCALE,
        flag(b_left > 0),
        needed as f64 / LENGTH_SCALE,
        flag(needed == 0),
        flag(b_left > 0 && s.depth == 0),
        flag(s.error.is_some()),
    ]);
}

/// Random balanced sequence with the given pair count and depth bound.
fn dyck_word(pairs: u32, max_depth: u32, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(2 * pairs as usize);
    let (mut opens, mut depth) = (0, 0);
    while opens < pairs || depth > 0 {
        let can_open = opens < pairs && depth < max_depth;
        let can_close = depth > 0;
        if can_open && (!can_close || rng.gen_bool(0.5)) {
            out.push(OPEN);
            opens += 1;
            depth += 1;
        } else {
            out.push(CLOSE);
            depth -= 1;
        }
    }
    out
}

pub(super) fn generate(tier: Tier, rng: &mut ChaCha8Rng) -> Generated {
    let band = tier.length_band();
    let (pairs, a_range, b_range, depth) = match tier {
        Tier::Easy => (1..=2u8, 0..=2u8, 0..=2u8, 1..=2u8),
        Tier::Medium => (2..=5, 0..=3, 1..=3, 2..=3),
        Tier::Hard => (5..=10, 1..=5, 1..=5, 2..=4),
    };
    loop {
        let meta = GrammarMeta {
            pairs: rng.gen_range(pairs.clone()),
            a_count: rng.gen_range(a_range.clone()),
            b_count: rng.gen_range(b_range.clone()),
            max_depth: rng.gen_range(depth.clone()),
        };
        let len = 2 * meta.pairs as usize + meta.a_count as usize + meta.b_count as usize;
        if !band.contains(&len) {
            continue;
        }
        let mut word = dyck_word(meta.pairs as u32, meta.max_depth as u32, rng);
        for _ in 0..meta.b_count {
            // gaps after a token that leaves depth >= 1
            let mut depth = 0i32;
            let mut gaps = Vec::new();
            for (i, &t) in word.iter().enumerate() {
                depth += match t {
                    OPEN => 1,
                    CLOSE => -1,
                    _ => 0,
                };
                if depth > 0 {
                    gaps.push(i + 1);
                }
            }
            let at = gaps[rng.gen_range(0..gaps.len())];
            word.insert(at, SYM_B);
        }
        for _ in 0..meta.a_count {
            let at = rng.gen_range(0..=word.len());
            word.insert(at, SYM_A);
        }
        word.push(TERMINAL);
        let prompt = vec![
            "pairs".to_string(),
            meta.pairs.to_string(),
            "a".into(),
            meta.a_count.to_string(),
            "b".into(),
            meta.b_count.to_string(),
            "depth".into(),
            meta.max_depth.to_string(),
        ];
        return Generated {
            prompt,
            max_len: len + 4,
            canonical: word,
            meta: ProblemMeta::Grammar(meta),
        };
    }
}
