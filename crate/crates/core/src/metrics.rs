//! Evaluation metrics and the exact oracles behind them.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::env::{SeqState, SequenceEnv};
use crate::error::{Error, Result};
use crate::policy::SsrPolicy;

/// Exact target distribution `p*(x) = R(x) / Z` over an enumerable env.
#[derive(Clone, Debug)]
pub struct TargetOracle {
    terminals: Vec<(SeqState, f64)>,
    z: f64,
    target_mean: f64,
}

impl TargetOracle {
    pub fn new(env: &SequenceEnv) -> Result<Self> {
        let terminals = env.enumerate_terminals()?;
        let z: f64 = terminals.iter().map(|(_, r)| r).sum();
        let target_mean = terminals.iter().map(|(_, r)| r * r).sum::<f64>() / z;
        Ok(Self { terminals, z, target_mean })
    }

    /// Terminals in lexicographic order with their rewards.
    pub fn terminals(&self) -> &[(SeqState, f64)] {
        &self.terminals
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    /// `p*` in the same order as [`TargetOracle::terminals`].
    pub fn probabilities(&self) -> Vec<f64> {
        self.terminals.iter().map(|(_, r)| r / self.z).collect()
    }

    /// Reward value at the given upper quantile: the reward of the
    /// `ceil(q * N)`-th best terminal.
    pub fn reward_quantile(&self, q: f64) -> f64 {
        let mut r: Vec<f64> = self.terminals.iter().map(|(_, r)| *r).collect();
        r.sort_unstable_by(|a, b| b.total_cmp(a));
        let k = ((q * r.len() as f64).ceil() as usize).clamp(1, r.len());
        r[k - 1]
    }
}

pub fn exact_target_mean(env: &SequenceEnv) -> Result<f64> {
    Ok(TargetOracle::new(env)?.target_mean())
}

pub fn accuracy(sample_rewards: &[f64], target_mean: f64) -> f64 {
    if sample_rewards.is_empty() || !(target_mean > 0.0) {
        return 0.0;
    }
    let mean = sample_rewards.iter().sum::<f64>() / sample_rewards.len() as f64;
    100.0 * (mean / target_mean).min(1.0)
}

fn level_index(s: &SeqState, a: usize) -> usize {
    s.tokens().iter().fold(0usize, |acc, &t| acc * a + t as usize)
}

/// Probability that the forward policy terminates at each terminal, indexed
/// by [`SequenceEnv::terminal_index`]. Mass is pushed level by level through
/// the DAG.
pub fn exact_terminating_distribution(policy: &SsrPolicy, env: &SequenceEnv) -> Result<Vec<f64>> {
    let levels = env.enumerate_states()?;
    let a = env.alphabet_size();
    let mut mass = vec![1.0];
    for level in &levels[..env.length()] {
        let mut next = vec![0.0; level.len() * a];
        for (s, m) in level.iter().zip(&mass) {
            if *m == 0.0 {
                continue;
            }
            let (children, probs) = policy.forward_dist(env, s)?;
            for (c, p) in children.iter().zip(probs) {
                next[level_index(c, a)] += m * p;
            }
        }
        mass = next;
    }
    Ok(mass)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModeSpec {
    /// Greedy in descending reward: a sample above `threshold` becomes a mode
    /// if it is at least `min_separation` away from every earlier mode.
    ThresholdSeparated { threshold: f64, min_separation: usize },
    /// A sample above `threshold` with no strictly higher reward within
    /// Hamming distance `radius`.
    LocalOptimum { threshold: f64, radius: usize },
}

impl ModeSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModeSpec::ThresholdSeparated { threshold, .. } | ModeSpec::LocalOptimum { threshold, .. }
                if !threshold.is_finite() =>
            {
                Err(Error::Invalid(format!("mode threshold {threshold} must be finite")))
            }
            ModeSpec::LocalOptimum { radius: 0, .. } => Err(Error::Invalid("mode radius must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Sequences within Hamming distance `radius` of `x`, excluding `x`.
pub fn hamming_ball(x: &SeqState, alphabet_size: usize, radius: usize) -> Vec<SeqState> {
    fn rec(tokens: &mut Vec<u8>, orig: &[u8], from: usize, left: usize, a: usize, out: &mut Vec<SeqState>) {
        if left == 0 {
            return;
        }
        for pos in from..tokens.len() {
            for t in 0..a as u8 {
                if t == orig[pos] {
                    continue;
                }
                tokens[pos] = t;
                out.push(SeqState::from_tokens(tokens.clone()));
                rec(tokens, orig, pos + 1, left - 1, a, out);
            }
            tokens[pos] = orig[pos];
        }
    }
    let mut out = Vec::new();
    let mut tokens = x.tokens().to_vec();
    rec(&mut tokens, x.tokens(), 0, radius, alphabet_size, &mut out);
    out
}

/// Distinct samples with their rewards, best first; ties broken by token order.
fn ranked_distinct(samples: &[SeqState], env: &SequenceEnv) -> Result<Vec<(SeqState, f64)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for x in samples {
        if seen.insert(x) {
            out.push((x.clone(), env.reward(x)?));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Modes among `samples` under `spec`, best first.
pub fn find_modes(samples: &[SeqState], spec: &ModeSpec, env: &SequenceEnv) -> Result<Vec<(SeqState, f64)>> {
    spec.validate()?;
    let ranked = ranked_distinct(samples, env)?;
    let mut modes: Vec<(SeqState, f64)> = Vec::new();
    match *spec {
        ModeSpec::ThresholdSeparated { threshold, min_separation } => {
            for (x, r) in ranked {
                if r < threshold {
                    break;
                }
                if modes.iter().all(|(m, _)| m.hamming(&x) >= min_separation) {
                    modes.push((x, r));
                }
            }
        }
        ModeSpec::LocalOptimum { threshold, radius } => {
            for (x, r) in ranked {
                if r < threshold {
                    break;
                }
                let mut is_max = true;
                for y in hamming_ball(&x, env.alphabet_size(), radius) {
                    if env.reward(&y)? > r {
                        is_max = false;
                        break;
                    }
                }
                if is_max {
                    modes.push((x, r));
                }
            }
        }
    }
    Ok(modes)
}

pub fn count_modes(samples: &[SeqState], spec: &ModeSpec, env: &SequenceEnv) -> Result<usize> {
    Ok(find_modes(samples, spec, env)?.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub top100_mean: f64,
    pub unique_fraction: f64,
    /// Mean pairwise Hamming distance over distinct samples.
    pub diversity: f64,
}

/// Number of distinct samples entering the pairwise diversity average.
pub const DIVERSITY_CAP: usize = 1000;

/// Top-100 mean is taken over all samples, duplicates included.
pub fn summary_metrics(samples: &[(SeqState, f64)]) -> SummaryMetrics {
    if samples.is_empty() {
        return SummaryMetrics { top100_mean: 0.0, unique_fraction: 0.0, diversity: 0.0 };
    }
    let mut rewards: Vec<f64> = samples.iter().map(|(_, r)| *r).collect();
    rewards.sort_unstable_by(|a, b| b.total_cmp(a));
    let top = &rewards[..rewards.len().min(100)];
    let top100_mean = top.iter().sum::<f64>() / top.len() as f64;

    let mut seen = HashSet::new();
    let mut distinct: Vec<&SeqState> = Vec::new();
    for (x, _) in samples {
        if seen.insert(x) {
            distinct.push(x);
        }
    }
    let unique_fraction = distinct.len() as f64 / samples.len() as f64;

    let d = &distinct[..distinct.len().min(DIVERSITY_CAP)];
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            total += d[i].hamming(d[j]);
            pairs += 1;
        }
    }
    let diversity = if pairs == 0 { 0.0 } else { total as f64 / pairs as f64 };
    SummaryMetrics { top100_mean, unique_fraction, diversity }
}

/// Metrics computed over a set of evaluation samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub n_samples: usize,
    pub mean_reward: f64,
    pub accuracy: Option<f64>,
    pub n_modes_threshold: Option<usize>,
    pub n_modes_localopt: Option<usize>,
    pub top100_mean: f64,
    pub unique_fraction: f64,
    pub diversity: f64,
}

/// Everything needed to score samples against an env.
#[derive(Clone, Debug, Default)]
pub struct MetricContext {
    pub target_mean: Option<f64>,
    pub threshold_modes: Option<ModeSpec>,
    pub localopt_modes: Option<ModeSpec>,
}

impl MetricContext {
    pub fn compute(&self, env: &SequenceEnv, samples: &[(SeqState, f64)]) -> Result<MetricBundle> {
        let rewards: Vec<f64> = samples.iter().map(|(_, r)| *r).collect();
        let states: Vec<SeqState> = samples.iter().map(|(x, _)| x.clone()).collect();
        let summary = summary_metrics(samples);
        let mean_reward =
            if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 };
        Ok(MetricBundle {
            n_samples: samples.len(),
            mean_reward,
            accuracy: self.target_mean.map(|t| accuracy(&rewards, t)),
            n_modes_threshold: self.threshold_modes.map(|s| count_modes(&states, &s, env)).transpose()?,
            n_modes_localopt: self.localopt_modes.map(|s| count_modes(&states, &s, env)).transpose()?,
            top100_mean: summary.top100_mean,
            unique_fraction: summary.unique_fraction,
            diversity: summary.diversity,
        })
    }
}
