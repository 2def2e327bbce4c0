//! Token-sequence MDPs: problem generation, exact checkers and state features.
//!
//! A state is the problem plus the solution prefix generated so far; an action
//! is the next token. Every environment shares the terminal token `<eot>` and
//! the same feature layout: one-hot encodings of the last three prefix tokens,
//! the normalized prefix length, environment summary features and a constant
//! bias as the final component.

mod arith;
mod grammar;
mod grid;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RrlError, Result};

pub use arith::ArithMeta;
pub use grammar::GrammarMeta;
pub use grid::GridMeta;

pub type TokenId = u32;

pub const EOT: &str = "<eot>";

/// Number of trailing prefix tokens encoded in the feature vector.
pub const FEATURE_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(RrlError::InvalidArgument(
                "a vocabulary needs at least two tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(RrlError::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn eot(&self) -> TokenId {
        self.index[EOT]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| RrlError::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    /// Whitespace-separated form, e.g. `"3 + 4 <eot>"`.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        self.encode(&parts)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.size()) {
            Some(&token) => Err(RrlError::OutOfVocabulary {
                token,
                size: self.size(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    ArithTarget,
    GrammarFill,
    GridPath,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::ArithTarget, EnvKind::GrammarFill, EnvKind::GridPath];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::ArithTarget => "arith_target",
            EnvKind::GrammarFill => "grammar_fill",
            EnvKind::GridPath => "grid_path",
        }
    }

    pub fn vocabulary(self) -> &'static Vocabulary {
        match self {
            EnvKind::ArithTarget => &arith::VOCAB,
            EnvKind::GrammarFill => &grammar::VOCAB,
            EnvKind::GridPath => &grid::VOCAB,
        }
    }

    fn summary_dim(self) -> usize {
        match self {
            EnvKind::ArithTarget => arith::SUMMARY_DIM,
            EnvKind::GrammarFill => grammar::SUMMARY_DIM,
            EnvKind::GridPath => grid::SUMMARY_DIM,
        }
    }

    /// Feature dimension F, constant for every problem and prefix of this kind.
    pub fn feature_dim(self) -> usize {
        FEATURE_WINDOW * (self.vocabulary().size() + 1) + 1 + self.summary_dim() + 1
    }

    pub fn bias_index(self) -> usize {
        self.feature_dim() - 1
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = RrlError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RrlError::UnknownEnvKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }

    /// Allowed canonical solution length, in content tokens (terminal excluded).
    pub fn length_band(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Tier::Easy => 1..=6,
            Tier::Medium => 7..=14,
            Tier::Hard => 15..=30,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = RrlError;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RrlError::UnknownTier(s.to_string()))
    }
}

/// Environment-specific checker data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemMeta {
    Arith(ArithMeta),
    Grammar(GrammarMeta),
    Grid(GridMeta),
}

impl ProblemMeta {
    pub fn env_kind(&self) -> EnvKind {
        match self {
            ProblemMeta::Arith(_) => EnvKind::ArithTarget,
            ProblemMeta::Grammar(_) => EnvKind::GrammarFill,
            ProblemMeta::Grid(_) => EnvKind::GridPath,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: String,
    pub env_kind: EnvKind,
    pub tier: Tier,
    pub prompt: Vec<String>,
    /// Canonical solution including the terminal `<eot>`.
    pub canonical: Vec<TokenId>,
    /// Maximum number of solution tokens, terminal included.
    pub max_len: usize,
    pub meta: ProblemMeta,
}

impl Problem {
    pub fn vocabulary(&self) -> &'static Vocabulary {
        self.env_kind.vocabulary()
    }

    /// Canonical length without the terminal token.
    pub fn content_len(&self) -> usize {
        self.canonical.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Solved,
    Failed,
    Overlength,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Outcome {
    pub fn solved() -> Self {
        Self {
            kind: OutcomeKind::Solved,
            detail: None,
        }
    }

    pub fn failed(detail: impl Into<String>) -> Self {
        Self {
            kind: OutcomeKind::Failed,
            detail: Some(detail.into()),
        }
    }

    pub fn overlength() -> Self {
        Self {
            kind: OutcomeKind::Overlength,
            detail: None,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.kind == OutcomeKind::Solved
    }
}

pub fn compute_reward(outcome: &Outcome) -> f64 {
    match outcome.kind {
        OutcomeKind::Solved => 1.0,
        OutcomeKind::Failed => -0.1,
        OutcomeKind::Overlength => -0.2,
    }
}

/// Splits a token sequence at its terminal token.
///
/// Returns the content before `<eot>` or an outcome when the sequence cannot
/// be a finished solution (no terminal, trailing tokens, too long).
pub(crate) fn split_terminal<'a>(
    tokens: &'a [TokenId],
    eot: TokenId,
    max_len: usize,
) -> std::result::Result<&'a [TokenId], Outcome> {
    match tokens.iter().position(|&t| t == eot) {
        None if tokens.len() >= max_len => Err(Outcome::overlength()),
        None => Err(Outcome::failed("missing terminal token")),
        Some(_) if tokens.len() > max_len => Err(Outcome::failed("longer than max_len")),
        Some(pos) if pos + 1 != tokens.len() => Err(Outcome::failed("tokens after terminal")),
        Some(pos) => Ok(&tokens[..pos]),
    }
}

pub fn check_solution(problem: &Problem, tokens: &[TokenId]) -> Outcome {
    if problem.vocabulary().check_ids(tokens).is_err() {
        return Outcome::failed("token outside vocabulary");
    }
    match &problem.meta {
        ProblemMeta::Arith(m) => arith::check(m, problem.max_len, tokens),
        ProblemMeta::Grammar(m) => grammar::check(m, problem.max_len, tokens),
        ProblemMeta::Grid(m) => grid::check(m, problem.max_len, tokens),
    }
}

pub fn featurize(problem: &Problem, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let vocab = problem.vocabulary();
    vocab.check_ids(prefix)?;
    if prefix.len() > problem.max_len {
        return Err(RrlError::PrefixTooLong {
            len: prefix.len(),
            limit: problem.max_len,
        });
    }
    let kind = problem.env_kind;
    let mut out = Vec::with_capacity(kind.feature_dim());
    let slots = vocab.size() + 1;
    for k in 0..FEATURE_WINDOW {
        let hot = if prefix.len() > k {
            prefix[prefix.len() - 1 - k] as usize
        } else {
            vocab.size()
        };
        out.extend((0..slots).map(|i| if i == hot { 1.0 } else { 0.0 }));
    }
    out.push(prefix.len() as f64 / problem.max_len as f64);
    match &problem.meta {
        ProblemMeta::Arith(m) => arith::summary_features(m, prefix, &mut out),
        ProblemMeta::Grammar(m) => grammar::summary_features(m, prefix, &mut out),
        ProblemMeta::Grid(m) => grid::summary_features(m, prefix, &mut out),
    }
    out.push(1.0);
    debug_assert_eq!(out.len(), kind.feature_dim());
    Ok(out)
}

/// Output of an environment-specific generator before ids are assigned.
pub(crate) struct Generated {
    prompt: Vec<String>,
    canonical: Vec<TokenId>,
    max_len: usize,
    meta: ProblemMeta,
}

fn generation_seed(kind: EnvKind, tier: Tier, seed: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add((kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((tier.index() + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_problems(kind: EnvKind, tier: Tier, count: usize, seed: u64) -> Result<Vec<Problem>> {
    if count == 0 {
        return Err(RrlError::InvalidArgument("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(generation_seed(kind, tier, seed));
    let problems = (0..count)
        .map(|i| {
            let g = match kind {
                EnvKind::ArithTarget => arith::generate(tier, &mut rng),
                EnvKind::GrammarFill => grammar::generate(tier, &mut rng),
                EnvKind::GridPath => grid::generate(tier, &mut rng),
            };
            Problem {
                id: format!("{kind}-{tier}-{seed}-{i}"),
                env_kind: kind,
                tier,
                prompt: g.prompt,
                canonical: g.canonical,
                max_len: g.max_len,
                meta: g.meta,
            }
        })
        .collect::<Vec<_>>();
    debug_assert!(problems
        .iter()
        .all(|p| check_solution(p, &p.canonical).is_solved()));
    Ok(problems)
}

/// Line format of a problem file: tokens are written as strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemRecord {
    id: String,
    env_kind: EnvKind,
    tier: Tier,
    prompt: Vec<String>,
    canonical: Vec<String>,
    max_len: usize,
    meta: ProblemMeta,
}

impl From<&Problem> for ProblemRecord {
    fn from(p: &Problem) -> Self {
        Self {
            id: p.id.clone(),
            env_kind: p.env_kind,
            tier: p.tier,
            prompt: p.prompt.clone(),
            canonical: p.vocabulary().decode(&p.canonical),
            max_len: p.max_len,
            meta: p.meta.clone(),
        }
    }
}

impl ProblemRecord {
    fn into_problem(self) -> std::result::Result<Problem, String> {
        if self.meta.env_kind() != self.env_kind {
            return Err(format!(
                "meta kind does not match env_kind {}",
                self.env_kind
            ));
        }
        let canonical = self
            .env_kind
            .vocabulary()
            .encode(&self.canonical)
            .map_err(|e| e.to_string())?;
        let problem = Problem {
            id: self.id,
            env_kind: self.env_kind,
            tier: self.tier,
            prompt: self.prompt,
            canonical,
            max_len: self.max_len,
            meta: self.meta,
        };
        if problem.prompt.is_empty() {
            return Err("empty prompt".into());
        }
        if !check_solution(&problem, &problem.canonical).is_solved() {
            return Err(format!("canonical solution of `{}` does not verify", problem.id));
        }
        Ok(problem)
    }
}

pub fn write_problems(path: impl AsRef<Path>, problems: &[Problem]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| RrlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in problems {
        let line = serde_json::to_string(&ProblemRecord::from(p)).expect("problem serializes");
        writeln!(w, "{line}").map_err(|e| RrlError::io(path, e))?;
    }
    w.flush().map_err(|e| RrlError::io(path, e))
}

pub fn read_problems(path: impl AsRef<Path>) -> Result<Vec<Problem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RrlError::io(path, e))?;
    let mut problems = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RrlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| RrlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: ProblemRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        problems.push(record.into_problem().map_err(parse_err)?);
    }
    Ok(problems)
}
