//! Back-and-forth local search over complete trajectories.
//!
//! A proposal walks `K` steps back from the terminal with `P_B`, then rebuilds
//! `K` steps with `P_F`. The walk back resamples the parent chain, so it can
//! land on a state that is not on the original path; in that case the rest
//! of the prefix is drawn from `P_B` as well and the proposal is made relative
//! to that re-routed copy of the original (same terminal, same reward).
//! Drawing the prefix from `P_B(.|x)` leaves the path-given-terminal
//! distribution unchanged, so the Metropolis-Hastings ratio below keeps
//! `R(x) / Z` stationary over terminals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{SeqState, SequenceEnv};
use crate::error::{Error, Result};
use crate::policy::{sample_index, RewardOracle, SsrPolicy, Trajectory};
use crate::replay::{Origin, ReplayDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Greedy: accept iff the new reward is strictly higher.
    Deterministic,
    /// Metropolis-Hastings acceptance.
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MhOrientation {
    /// `min[1, R'/R * q(tau|tau') / q(tau'|tau)]`.
    Standard,
    /// `min[1, R'/R * q(tau'|tau) / q(tau|tau')]`.
    /// Kept only for comparison: it is not stationary for `R`.
    Inverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub kind: FilterKind,
    pub orientation: MhOrientation,
}

impl FilterRule {
    pub fn deterministic() -> Self {
        Self { kind: FilterKind::Deterministic, orientation: MhOrientation::Standard }
    }

    pub fn stochastic() -> Self {
        Self { kind: FilterKind::Stochastic, orientation: MhOrientation::Standard }
    }
}

impl Default for FilterRule {
    fn default() -> Self {
        Self::deterministic()
    }
}

/// Default destroy/rebuild depth `floor((L + 1) / 2)`.
pub fn default_k(length: usize) -> usize {
    length.div_ceil(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backtrack {
    /// `s_0 ..= s'_{n-K}`.
    pub prefix: Vec<SeqState>,
    /// The destroyed segment `s'_{n-K} ..= x` in forward order.
    pub destroyed: Vec<SeqState>,
    /// `log P_B` of the destroyed segment given `x`.
    pub log_pb: f64,
    /// True when the walk left the original path and the prefix was redrawn.
    pub rerouted: bool,
}

fn sample_parent<R: Rng + ?Sized>(policy: &SsrPolicy, env: &SequenceEnv, s: &SeqState, rng: &mut R) -> Result<(SeqState, f64)> {
    let (parents, probs) = policy.backward_dist(env, s)?;
    let i = sample_index(&probs, rng);
    Ok((parents[i].clone(), probs[i].ln()))
}

pub fn backtrack<R: Rng + ?Sized>(
    policy: &SsrPolicy,
    env: &SequenceEnv,
    traj: &Trajectory,
    k: usize,
    rng: &mut R,
) -> Result<Backtrack> {
    let n = traj.len();
    if k > n {
        return Err(Error::Invalid(format!("backtrack depth {k} exceeds trajectory length {n}")));
    }
    let mut back = vec![traj.terminal().clone()];
    let mut log_pb = 0.0;
    for _ in 0..k {
        let (p, lp) = sample_parent(policy, env, back.last().unwrap(), rng)?;
        log_pb += lp;
        back.push(p);
    }
    let end = back.last().unwrap().clone();
    back.reverse();
    let destroyed = back;
    if end == traj.states[n - k] {
        return Ok(Backtrack { prefix: traj.states[..=n - k].to_vec(), destroyed, log_pb, rerouted: false });
    }
    let mut chain = vec![end];
    while !chain.last().unwrap().is_initial() {
        let (p, _) = sample_parent(policy, env, chain.last().unwrap(), rng)?;
        chain.push(p);
    }
    chain.reverse();
    Ok(Backtrack { prefix: chain, destroyed, log_pb, rerouted: true })
}

/// Pure `P_F` rollout from `start` to a terminal. Returns the new states
/// after `start`, their `log P_F` and the `log P_B` of the same edges.
pub fn reconstruct<R: Rng + ?Sized>(
    policy: &SsrPolicy,
    env: &SequenceEnv,
    start: &SeqState,
    rng: &mut R,
) -> Result<(Vec<SeqState>, f64, f64)> {
    let (mut states, log_pf, log_pb) = policy.rollout(env, start, 0.0, rng)?;
    states.remove(0);
    Ok((states, log_pf, log_pb))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    /// The trajectory the proposal is relative to.
    pub original: Trajectory,
    pub candidate: Trajectory,
    /// Number of leading states shared by `original` and `candidate`.
    pub shared_prefix_len: usize,
    /// `log q(tau'|tau) = log P_B(tau_back|x) + log P_F(tau_recon)`.
    pub log_q_fwd: f64,
    /// `log q(tau|tau') = log P_B(tau_recon|x') + log P_F(tau_destroy)`.
    pub log_q_bwd: f64,
}

/// Destroy `k` steps of `traj` with `P_B` and rebuild them with `P_F`.
/// Evaluates the candidate's reward exactly once.
pub fn propose<R: Rng + ?Sized>(
    policy: &SsrPolicy,
    oracle: &RewardOracle,
    traj: &Trajectory,
    k: usize,
    rng: &mut R,
) -> Result<Proposal> {
    let env = oracle.env();
    if !env.is_terminal(traj.terminal()) || !traj.states[0].is_initial() {
        return Err(Error::Invalid("proposal needs a complete trajectory".into()));
    }
    let bt = backtrack(policy, env, traj, k, rng)?;
    let start = bt.prefix.last().unwrap().clone();
    let (recon, recon_pf, recon_pb) = reconstruct(policy, env, &start, rng)?;

    let mut destroy_pf = 0.0;
    for w in bt.destroyed.windows(2) {
        destroy_pf += policy.forward_step(env, &w[0], &w[1])?.log_prob;
    }
    let (prefix_pf, prefix_pb) = policy.traj_logprobs(env, &bt.prefix)?;

    let original = if bt.rerouted {
        let mut states = bt.prefix.clone();
        states.extend_from_slice(&bt.destroyed[1..]);
        let (log_pf, log_pb) = policy.traj_logprobs(env, &states)?;
        Trajectory { states, log_pf, log_pb, log_reward: traj.log_reward }
    } else {
        traj.clone()
    };

    let shared_prefix_len = bt.prefix.len();
    let mut states = bt.prefix;
    states.extend(recon);
    let log_reward = oracle.log_reward(states.last().unwrap())?;
    let candidate = Trajectory {
        states,
        log_pf: prefix_pf + recon_pf,
        log_pb: prefix_pb + recon_pb,
        log_reward,
    };
    Ok(Proposal {
        original,
        candidate,
        shared_prefix_len,
        log_q_fwd: bt.log_pb + recon_pf,
        log_q_bwd: recon_pb + destroy_pf,
    })
}

/// Probability of accepting `proposal` under `rule`.
pub fn acceptance_probability(rule: &FilterRule, proposal: &Proposal) -> f64 {
    let d_reward = proposal.candidate.log_reward - proposal.original.log_reward;
    match rule.kind {
        FilterKind::Deterministic => {
            if d_reward > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        FilterKind::Stochastic => {
            let q = match rule.orientation {
                MhOrientation::Standard => proposal.log_q_bwd - proposal.log_q_fwd,
                MhOrientation::Inverted => proposal.log_q_fwd - proposal.log_q_bwd,
            };
            (d_reward + q).min(0.0).exp()
        }
    }
}

pub fn accept<R: Rng + ?Sized>(rule: &FilterRule, proposal: &Proposal, rng: &mut R) -> bool {
    let a = acceptance_probability(rule, proposal);
    match rule.kind {
        FilterKind::Deterministic => a > 0.0,
        FilterKind::Stochastic => rng.gen::<f64>() < a,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl RefineStats {
    /// Mean acceptance indicator; `None` when nothing was proposed.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposals > 0).then(|| self.accepted as f64 / self.proposals as f64)
    }
}

/// Runs `iterations` rounds of propose/insert/filter over every chain.
/// Every proposal enters `dataset`, accepted or not.
#[allow(clippy::too_many_arguments)]
pub fn refine_batch<R: Rng + ?Sized>(
    policy: &SsrPolicy,
    oracle: &RewardOracle,
    chains: &mut [Trajectory],
    iterations: usize,
    k: usize,
    rule: &FilterRule,
    dataset: &mut ReplayDataset,
    round: usize,
    rng: &mut R,
) -> Result<RefineStats> {
    let mut stats = RefineStats::default();
    for _ in 0..iterations {
        for chain in chains.iter_mut() {
            let proposal = propose(policy, oracle, chain, k, rng)?;
            let accepted = accept(rule, &proposal, rng);
            stats.proposals += 1;
            let origin = if accepted {
                stats.accepted += 1;
                Origin::ProposalAccepted
            } else {
                Origin::ProposalRejected
            };
            dataset.insert(proposal.candidate.clone(), round, origin);
            if accepted {
                *chain = proposal.candidate;
            }
        }
    }
    Ok(stats)
}
