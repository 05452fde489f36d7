//! Sequence-construction MDPs.
//!
//! States are token strings of length `0..=L`; the empty string is the
//! initial state and strings of length `L` are terminal. In prepend-append
//! mode an action adds one token at either end, so a terminal string is
//! usually reachable along several trajectories. Actions that yield the same
//! string are merged into a single edge of the state graph.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `A^L` for anything that enumerates terminals.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlphabet {
    symbols: Vec<char>,
}

impl TokenAlphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.len() < 2 {
            return Err(Error::Invalid(format!(
                "alphabet needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        if symbols.len() > u8::MAX as usize {
            return Err(Error::Invalid("alphabet has too many symbols".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Invalid(format!("duplicate alphabet symbol {c:?}")));
            }
            if c.is_whitespace() || *c == ',' {
                return Err(Error::Invalid(format!("unusable alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<u8> {
        self.symbols.iter().position(|&s| s == c).map(|i| i as u8)
    }

    /// Parses a string into token indices, rejecting unknown symbols.
    pub fn parse(&self, text: &str) -> Result<SeqState> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Invalid(format!("symbol {c:?} not in alphabet in {text:?}")))
            })
            .collect::<Result<Vec<u8>>>()
            .map(SeqState::from_tokens)
    }

    pub fn render(&self, s: &SeqState) -> String {
        s.tokens().iter().map(|&t| self.symbols[t as usize]).collect()
    }
}

/// A partial or complete sequence; tokens are indices into a [`TokenAlphabet`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqState {
    tokens: Vec<u8>,
}

impl SeqState {
    pub fn initial() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn from_tokens(tokens: Vec<u8>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_initial(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hamming(&self, other: &SeqState) -> usize {
        debug_assert_eq!(self.len(), other.len());
        self.tokens
            .iter()
            .zip(&other.tokens)
            .filter(|(a, b)| a != b)
            .count()
    }

    fn prepended(&self, t: u8) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.push(t);
        tokens.extend_from_slice(&self.tokens);
        Self { tokens }
    }

    fn appended(&self, t: u8) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(t);
        Self { tokens }
    }
}

impl fmt::Display for SeqState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuildMode {
    PrependAppend,
    AppendOnly,
}

/// Planted-mode landscape: `raw(x) = max_k exp(-hamming(x, mode_k) / width) + floor * u(x)`
/// where `u(x)` is a seeded per-sequence uniform draw in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLandscape {
    pub seed: u64,
    pub modes: Vec<SeqState>,
    pub width: f64,
    pub floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_modes: usize,
    pub width: f64,
    pub floor: f64,
    /// Minimum pairwise Hamming distance between planted modes.
    pub min_separation: usize,
}

impl SyntheticLandscape {
    pub fn generate(spec: &SyntheticSpec, alphabet_size: usize, length: usize) -> Result<Self> {
        if spec.n_modes == 0 {
            return Err(Error::Invalid("synthetic landscape needs at least one mode".into()));
        }
        if !(spec.width > 0.0 && spec.width.is_finite()) {
            return Err(Error::Invalid(format!("synthetic width must be positive, got {}", spec.width)));
        }
        if !(spec.floor >= 0.0 && spec.floor.is_finite()) {
            return Err(Error::Invalid(format!("synthetic floor must be >= 0, got {}", spec.floor)));
        }
        // Planted modes must be the strict global maxima.
        if (-1.0 / spec.width).exp() + spec.floor >= 1.0 {
            return Err(Error::Invalid(format!(
                "synthetic width {} with floor {} does not keep planted modes as maxima",
                spec.width, spec.floor
            )));
        }
        if spec.min_separation > length {
            return Err(Error::Invalid(format!(
                "mode separation {} exceeds sequence length {length}",
                spec.min_separation
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let tokens: Vec<u8> = (0..alphabet_size as u8).collect();
        let mut modes: Vec<SeqState> = Vec::with_capacity(spec.n_modes);
        let mut attempts = 0usize;
        while modes.len() < spec.n_modes {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Invalid(format!(
                    "could not plant {} modes with separation {}",
                    spec.n_modes, spec.min_separation
                )));
            }
            let cand = SeqState::from_tokens(
                (0..length).map(|_| *tokens.choose(&mut rng).unwrap()).collect(),
            );
            if modes.iter().all(|m| m.hamming(&cand) >= spec.min_separation.max(1)) {
                modes.push(cand);
            }
        }
        Ok(Self { seed: spec.seed, modes, width: spec.width, floor: spec.floor })
    }

    fn noise(&self, x: &SeqState) -> f64 {
        let key = x
            .tokens()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |acc, &t| (acc ^ t as u64).wrapping_mul(0x0100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key);
        rng.gen::<f64>()
    }

    pub fn raw(&self, x: &SeqState) -> f64 {
        let nearest = self.modes.iter().map(|m| m.hamming(x)).min().unwrap_or(x.len());
        (-(nearest as f64) / self.width).exp() + self.floor * self.noise(x)
    }

    /// Exact maximum of `raw`; attained at a planted mode.
    pub fn max_raw(&self) -> f64 {
        self.modes.iter().map(|m| self.raw(m)).fold(f64::MIN, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RawReward {
    Table(HashMap<SeqState, f64>),
    Synthetic(SyntheticLandscape),
}

impl RawReward {
    fn lookup(&self, x: &SeqState) -> Option<f64> {
        match self {
            RawReward::Table(t) => t.get(x).copied(),
            RawReward::Synthetic(s) => Some(s.raw(x)),
        }
    }
}

/// Raw rewards plus normalization: `R(x) = (raw(x) * C / max_raw)^beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    raw: RawReward,
    max_raw: f64,
    scale_cap: Option<f64>,
    beta: f64,
}

impl RewardSpec {
    /// `scale_cap = None` leaves raw values unscaled.
    pub fn new(raw: RawReward, scale_cap: Option<f64>, beta: f64) -> Result<Self> {
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::Invalid(format!("reward exponent beta must be >= 1, got {beta}")));
        }
        if let Some(c) = scale_cap {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Invalid(format!("scale cap must be positive, got {c}")));
            }
        }
        let max_raw = match &raw {
            RawReward::Table(t) => {
                if let Some((_, v)) = t.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                    return Err(Error::Invalid(format!("raw reward {v} is negative or non-finite")));
                }
                t.values().copied().fold(0.0, f64::max)
            }
            RawReward::Synthetic(s) => s.max_raw(),
        };
        if max_raw <= 0.0 {
            return Err(Error::Invalid("at least one raw reward must be positive".into()));
        }
        Ok(Self { raw, max_raw, scale_cap, beta })
    }

    pub fn raw(&self) -> &RawReward {
        &self.raw
    }

    pub fn max_raw(&self) -> f64 {
        self.max_raw
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn scale_cap(&self) -> Option<f64> {
        self.scale_cap
    }

    /// Multiplier applied to raw values before exponentiation.
    pub fn normalization(&self) -> f64 {
        self.scale_cap.map_or(1.0, |c| c / self.max_raw)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceEnv {
    alphabet: TokenAlphabet,
    length: usize,
    mode: BuildMode,
    reward: RewardSpec,
    enumeration_cap: u64,
}

impl SequenceEnv {
    pub fn new(alphabet: TokenAlphabet, length: usize, mode: BuildMode, reward: RewardSpec) -> Result<Self> {
        if length == 0 {
            return Err(Error::Invalid("target length must be positive".into()));
        }
        if let RawReward::Table(t) = &reward.raw {
            for x in t.keys() {
                if x.len() != length || x.tokens().iter().any(|&k| k as usize >= alphabet.len()) {
                    return Err(Error::Invalid(format!(
                        "reward table entry {:?} does not fit alphabet/length",
                        alphabet.render(x)
                    )));
                }
            }
        }
        if let RawReward::Synthetic(s) = &reward.raw {
            if s.modes.iter().any(|m| m.len() != length) {
                return Err(Error::Invalid("synthetic modes do not match target length".into()));
            }
        }
        Ok(Self { alphabet, length, mode, reward, enumeration_cap: DEFAULT_ENUMERATION_CAP })
    }

    pub fn with_enumeration_cap(mut self, cap: u64) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn alphabet(&self) -> &TokenAlphabet {
        &self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn mode(&self) -> BuildMode {
        self.mode
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.enumeration_cap
    }

    pub fn render(&self, s: &SeqState) -> String {
        self.alphabet.render(s)
    }

    pub fn is_terminal(&self, s: &SeqState) -> bool {
        s.len() == self.length
    }

    pub fn children(&self, s: &SeqState) -> Result<Vec<SeqState>> {
        if s.len() >= self.length {
            return Err(Error::TerminalState(self.render(s)));
        }
        let a = self.alphabet.len() as u8;
        let mut out = Vec::with_capacity(2 * a as usize);
        if self.mode == BuildMode::PrependAppend {
            for t in 0..a {
                push_unique(&mut out, s.prepended(t));
            }
        }
        for t in 0..a {
            push_unique(&mut out, s.appended(t));
        }
        Ok(out)
    }

    pub fn parents(&self, s: &SeqState) -> Result<Vec<SeqState>> {
        if s.is_initial() {
            return Err(Error::InitialState);
        }
        let tokens = s.tokens();
        let mut out = Vec::with_capacity(2);
        if self.mode == BuildMode::PrependAppend {
            out.push(SeqState::from_tokens(tokens[1..].to_vec()));
        }
        push_unique(&mut out, SeqState::from_tokens(tokens[..tokens.len() - 1].to_vec()));
        Ok(out)
    }

    /// Whether `to` is a child of `from`.
    pub fn is_edge(&self, from: &SeqState, to: &SeqState) -> bool {
        if to.len() != from.len() + 1 || to.len() > self.length {
            return false;
        }
        let t = to.tokens();
        let appended = &t[..t.len() - 1] == from.tokens();
        match self.mode {
            BuildMode::AppendOnly => appended,
            BuildMode::PrependAppend => appended || &t[1..] == from.tokens(),
        }
    }

    pub fn raw_reward(&self, x: &SeqState) -> Result<f64> {
        if !self.is_terminal(x) {
            return Err(Error::NotTerminal(self.render(x)));
        }
        self.reward
            .raw
            .lookup(x)
            .ok_or_else(|| Error::UnknownTerminal(self.render(x)))
    }

    /// `log R(x)`; kept in log space so large exponents do not overflow.
    pub fn log_reward(&self, x: &SeqState) -> Result<f64> {
        let raw = self.raw_reward(x)?;
        if raw <= 0.0 {
            return Err(Error::ZeroReward(self.render(x)));
        }
        Ok(self.reward.beta * (raw * self.reward.normalization()).ln())
    }

    pub fn reward(&self, x: &SeqState) -> Result<f64> {
        self.log_reward(x).map(f64::exp)
    }

    /// Number of terminal objects, `A^L`, as a float so it never overflows.
    pub fn n_terminals(&self) -> f64 {
        (self.alphabet.len() as f64).powi(self.length as i32)
    }

    pub fn is_enumerable(&self) -> bool {
        self.n_terminals() <= self.enumeration_cap as f64
    }

    fn check_enumerable(&self) -> Result<usize> {
        let size = self.n_terminals();
        if size > self.enumeration_cap as f64 {
            return Err(Error::TooLarge { size, cap: self.enumeration_cap });
        }
        Ok(size as usize)
    }

    /// Lexicographic position of a terminal among all `A^L` strings.
    pub fn terminal_index(&self, x: &SeqState) -> usize {
        let a = self.alphabet.len();
        x.tokens().iter().fold(0usize, |acc, &t| acc * a + t as usize)
    }

    pub fn terminal_from_index(&self, mut index: usize) -> SeqState {
        let a = self.alphabet.len();
        let mut tokens = vec![0u8; self.length];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % a) as u8;
            index /= a;
        }
        SeqState::from_tokens(tokens)
    }

    /// All terminals in lexicographic order with their rewards.
    pub fn enumerate_terminals(&self) -> Result<Vec<(SeqState, f64)>> {
        let n = self.check_enumerable()?;
        (0..n)
            .map(|i| {
                let x = self.terminal_from_index(i);
                let r = self.reward(&x)?;
                Ok((x, r))
            })
            .collect()
    }

    /// All states grouped by length, `levels[k]` holding the strings of length `k`.
    pub fn enumerate_states(&self) -> Result<Vec<Vec<SeqState>>> {
        self.check_enumerable()?;
        let a = self.alphabet.len();
        let mut levels = vec![vec![SeqState::initial()]];
        for _ in 0..self.length {
            let prev = levels.last().unwrap();
            let mut next = Vec::with_capacity(prev.len() * a);
            for s in prev {
                for t in 0..a as u8 {
                    next.push(s.appended(t));
                }
            }
            levels.push(next);
        }
        Ok(levels)
    }
}

fn push_unique(out: &mut Vec<SeqState>, s: SeqState) {
    if !out.contains(&s) {
        out.push(s);
    }
}

/// Reads a `<sequence>,<value>` reward table. A first line whose value does
/// not parse as a number is treated as a header.
pub fn read_reward_table(reader: impl BufRead, alphabet: &TokenAlphabet) -> Result<HashMap<SeqState, f64>> {
    let mut table = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (seq, value) = line.split_once(',').ok_or_else(|| {
            Error::Invalid(format!("reward table line {}: expected <sequence>,<value>", lineno + 1))
        })?;
        let value = match value.trim().parse::<f64>() {
            Ok(v) => v,
            Err(_) if lineno == 0 => continue,
            Err(_) => {
                return Err(Error::Invalid(format!(
                    "reward table line {}: bad value {:?}",
                    lineno + 1,
                    value.trim()
                )))
            }
        };
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::Invalid(format!(
                "reward table line {}: value {value} must be finite and >= 0",
                lineno + 1
            )));
        }
        let x = alphabet
            .parse(seq.trim())
            .map_err(|e| Error::Invalid(format!("reward table line {}: {e}", lineno + 1)))?;
        if table.insert(x, value).is_some() {
            return Err(Error::Invalid(format!(
                "reward table line {}: duplicate sequence {:?}",
                lineno + 1,
                seq.trim()
            )));
        }
    }
    Ok(table)
}

pub fn load_reward_table(path: &Path, alphabet: &TokenAlphabet) -> Result<HashMap<SeqState, f64>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Invalid(format!("cannot open reward table {}: {e}", path.display())))?;
    read_reward_table(std::io::BufReader::new(file), alphabet)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn table_env(alphabet: &str, entries: &[(&str, f64)], scale_cap: Option<f64>, beta: f64) -> SequenceEnv {
        let alpha = TokenAlphabet::new(alphabet).unwrap();
        let len = entries[0].0.len();
        let table = entries.iter().map(|(s, v)| (alpha.parse(s).unwrap(), *v)).collect();
        let reward = RewardSpec::new(RawReward::Table(table), scale_cap, beta).unwrap();
        SequenceEnv::new(alpha, len, BuildMode::PrependAppend, reward).unwrap()
    }

    pub fn tiny_env() -> SequenceEnv {
        table_env("AB", &[("AA", 1.0), ("AB", 2.0), ("BA", 3.0), ("BB", 4.0)], None, 1.0)
    }

    fn synthetic_env(a: &str, len: usize, mode: BuildMode) -> SequenceEnv {
        let alpha = TokenAlphabet::new(a).unwrap();
        let spec = SyntheticSpec { seed: 3, n_modes: 2, width: 1.0, floor: 1e-3, min_separation: 1 };
        let land = SyntheticLandscape::generate(&spec, alpha.len(), len).unwrap();
        let reward = RewardSpec::new(RawReward::Synthetic(land), Some(1.0), 1.0).unwrap();
        SequenceEnv::new(alpha, len, mode, reward).unwrap()
    }

    fn strings(env: &SequenceEnv, states: &[SeqState]) -> Vec<String> {
        states.iter().map(|s| env.render(s)).collect()
    }

    #[test]
    fn alphabet_rejects_duplicates_and_singletons() {
        assert!(TokenAlphabet::new("A").is_err());
        assert!(TokenAlphabet::new("ABA").is_err());
        assert_eq!(TokenAlphabet::new("ACGT").unwrap().len(), 4);
    }

    #[test]
    fn children_examples() {
        let env = synthetic_env("AB", 3, BuildMode::PrependAppend);
        let s = env.alphabet().parse("AB").unwrap();
        assert_eq!(strings(&env, &env.children(&s).unwrap()), ["AAB", "BAB", "ABA", "ABB"]);

        let s0 = SeqState::initial();
        assert_eq!(env.children(&s0).unwrap().len(), 2);
        let env4 = synthetic_env("ACGT", 8, BuildMode::PrependAppend);
        assert_eq!(env4.children(&s0).unwrap().len(), 4);

        let x = env.alphabet().parse("ABA").unwrap();
        assert!(matches!(env.children(&x), Err(Error::TerminalState(_))));
    }

    #[test]
    fn duplicate_children_merge() {
        let env = synthetic_env("AB", 2, BuildMode::PrependAppend);
        let s = env.alphabet().parse("A").unwrap();
        // prepend-A and append-A coincide
        assert_eq!(strings(&env, &env.children(&s).unwrap()), ["AA", "BA", "AB"]);
        let ss = env.alphabet().parse("AAA");
        let env3 = synthetic_env("AB", 4, BuildMode::PrependAppend);
        let kids = env3.children(&ss.unwrap()).unwrap();
        assert_eq!(strings(&env3, &kids), ["AAAA", "BAAA", "AAAB"]);
    }

    #[test]
    fn parents_examples() {
        let env = synthetic_env("ABC", 3, BuildMode::PrependAppend);
        let p = |s: &str| strings(&env, &env.parents(&env.alphabet().parse(s).unwrap()).unwrap());
        assert_eq!(p("ABC"), ["BC", "AB"]);
        assert_eq!(p("AA"), ["A"]);
        assert_eq!(p("A"), [""]);
        assert!(matches!(env.parents(&SeqState::initial()), Err(Error::InitialState)));
    }

    #[test]
    fn append_only_has_single_parent() {
        let env = synthetic_env("AB", 3, BuildMode::AppendOnly);
        let s = env.alphabet().parse("AB").unwrap();
        assert_eq!(strings(&env, &env.children(&s).unwrap()), ["ABA", "ABB"]);
        assert_eq!(strings(&env, &env.parents(&s).unwrap()), ["A"]);
    }

    #[test]
    fn reward_normalization() {
        let env = tiny_env();
        let bb = env.alphabet().parse("BB").unwrap();
        assert_eq!(env.reward(&bb).unwrap(), 4.0);
        let env = table_env("AB", &[("AA", 1.0), ("AB", 2.0), ("BA", 3.0), ("BB", 4.0)], Some(4.0), 1.0);
        assert!((env.reward(&bb).unwrap() - 4.0).abs() < 1e-12);

        // raw max 0.5 scaled to 10, exponent 8
        let env = table_env("AB", &[("AA", 0.1), ("AB", 0.5)], Some(10.0), 8.0);
        let ab = env.alphabet().parse("AB").unwrap();
        assert!((env.reward(&ab).unwrap() / 1e8 - 1.0).abs() < 1e-12);

        // normalized 0.5 cubed
        let env = table_env("AB", &[("AA", 0.5), ("AB", 1.0)], Some(1.0), 3.0);
        let aa = env.alphabet().parse("AA").unwrap();
        assert!((env.reward(&aa).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn reward_errors() {
        let env = table_env("AB", &[("AA", 1.0), ("AB", 2.0)], None, 1.0);
        let ba = env.alphabet().parse("BA").unwrap();
        assert!(matches!(env.reward(&ba), Err(Error::UnknownTerminal(_))));
        let a = env.alphabet().parse("A").unwrap();
        assert!(matches!(env.reward(&a), Err(Error::NotTerminal(_))));
    }

    #[test]
    fn enumeration_counts_and_cap() {
        assert_eq!(tiny_env().enumerate_terminals().unwrap().len(), 4);
        let env = synthetic_env("ACGT", 8, BuildMode::PrependAppend);
        let all = env.enumerate_terminals().unwrap();
        assert_eq!(all.len(), 65536);
        assert!(all.windows(2).all(|w| w[0].0 < w[1].0));
        let big = synthetic_env("ACGT", 14, BuildMode::PrependAppend);
        let err = big.enumerate_terminals().unwrap_err();
        assert!(err.to_string().contains("too large to enumerate"));
    }

    #[test]
    fn terminal_index_roundtrip() {
        let env = synthetic_env("ACGT", 5, BuildMode::PrependAppend);
        for i in [0, 1, 17, 1023] {
            assert_eq!(env.terminal_index(&env.terminal_from_index(i)), i);
        }
    }

    /// Counts complete trajectories ending at `x` by walking parents.
    fn count_paths(env: &SequenceEnv, x: &SeqState) -> usize {
        if x.is_initial() {
            return 1;
        }
        env.parents(x).unwrap().iter().map(|p| count_paths(env, p)).sum()
    }

    #[test]
    fn trajectory_counts() {
        let env = synthetic_env("ABC", 3, BuildMode::PrependAppend);
        assert_eq!(count_paths(&env, &env.alphabet().parse("ABC").unwrap()), 4);
        assert_eq!(count_paths(&env, &env.alphabet().parse("AAA").unwrap()), 1);
        let env = synthetic_env("ABC", 3, BuildMode::AppendOnly);
        for (x, _) in env.enumerate_terminals().unwrap() {
            assert_eq!(count_paths(&env, &x), 1);
        }
    }

    #[test]
    fn parent_child_duality_exhaustive() {
        for a in ["AB", "ABC", "ABCD"] {
            for len in 1..=6 {
                let env = synthetic_env(a, len, BuildMode::PrependAppend);
                let levels = env.enumerate_states().unwrap();
                for level in &levels[..len] {
                    for s in level {
                        for c in env.children(s).unwrap() {
                            assert!(c.len() > s.len());
                            assert!(env.parents(&c).unwrap().contains(s));
                            assert!(env.is_edge(s, &c));
                        }
                    }
                }
                for level in &levels[1..] {
                    for s in level {
                        for p in env.parents(s).unwrap() {
                            assert!(p.len() < s.len());
                            assert!(env.children(&p).unwrap().contains(s));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn synthetic_rewards_positive_and_peaked() {
        let env = synthetic_env("ACGT", 6, BuildMode::PrependAppend);
        let RawReward::Synthetic(land) = env.reward_spec().raw() else { unreachable!() };
        let all = env.enumerate_terminals().unwrap();
        assert!(all.iter().all(|(_, r)| *r > 0.0));
        let max = all.iter().map(|(_, r)| *r).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let best = all.iter().find(|(_, r)| *r == max).unwrap();
        assert!(land.modes.contains(&best.0));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let spec = SyntheticSpec { seed: 11, n_modes: 4, width: 1.0, floor: 1e-3, min_separation: 4 };
        let a = SyntheticLandscape::generate(&spec, 4, 8).unwrap();
        let b = SyntheticLandscape::generate(&spec, 4, 8).unwrap();
        assert_eq!(a, b);
        for (i, m) in a.modes.iter().enumerate() {
            for n in &a.modes[..i] {
                assert!(m.hamming(n) >= 4);
            }
        }
    }

    #[test]
    fn reward_table_parsing() {
        let alpha = TokenAlphabet::new("AB").unwrap();
        let text = "sequence,value\nAA,1.0\nAB,2\n\nBB,0.5\n";
        let t = read_reward_table(text.as_bytes(), &alpha).unwrap();
        assert_eq!(t.len(), 3);
        assert!(read_reward_table("AA,1\nAC,2\n".as_bytes(), &alpha).is_err());
        assert!(read_reward_table("AA,1\nAB,x\n".as_bytes(), &alpha).is_err());
        assert!(read_reward_table("AA,1\nAA,2\n".as_bytes(), &alpha).is_err());
        assert!(read_reward_table("AA,-1\n".as_bytes(), &alpha).is_err());
    }
}
