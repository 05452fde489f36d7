//! Forward/backward policies in the relative-edge-flow (SSR) parametrization.
//!
//! An edge `s -> s'` is scored by a network that reads the concatenated
//! one-hot encodings of both states; a policy is the softmax of the clipped
//! scores over the children (forward) or parents (backward) of a state.

use std::cell::Cell;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{SeqState, SequenceEnv};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, Tape};

pub const DEFAULT_LOGIT_CLIP: f64 = 50.0;
pub const DEFAULT_LOG_Z_INIT: f64 = 5.0;

/// Counts calls to the reward function.
pub struct RewardOracle<'a> {
    env: &'a SequenceEnv,
    calls: Cell<u64>,
}

impl<'a> RewardOracle<'a> {
    pub fn new(env: &'a SequenceEnv) -> Self {
        Self { env, calls: Cell::new(0) }
    }

    pub fn env(&self) -> &'a SequenceEnv {
        self.env
    }

    pub fn log_reward(&self, x: &SeqState) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.env.log_reward(x)
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

/// A complete path `s_0 -> ... -> s_n = x` with cached log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<SeqState>,
    pub log_pf: f64,
    pub log_pb: f64,
    pub log_reward: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> &SeqState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn reward(&self) -> f64 {
        self.log_reward.exp()
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.states.len() <= 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BackwardModel {
    Learned(DenseNet),
    /// Uniform over parents; used by the MaxEnt objective.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub log_z_init: f64,
    pub uniform_backward: bool,
    pub state_flow: bool,
    pub logit_clip: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            activation: Activation::LeakyRelu,
            log_z_init: DEFAULT_LOG_Z_INIT,
            uniform_backward: false,
            state_flow: false,
            logit_clip: DEFAULT_LOGIT_CLIP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsrPolicy {
    pub forward_net: DenseNet,
    pub backward: BackwardModel,
    pub log_z: f64,
    pub state_flow: Option<DenseNet>,
    pub logit_clip: f64,
}

/// Gradients with the same layout as the policy parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub log_z: f64,
    pub state_flow: Vec<f64>,
}

impl PolicyGrads {
    pub fn zeros(policy: &SsrPolicy) -> Self {
        Self {
            forward: vec![0.0; policy.forward_net.num_params()],
            backward: match &policy.backward {
                BackwardModel::Learned(n) => vec![0.0; n.num_params()],
                BackwardModel::Uniform => Vec::new(),
            },
            log_z: 0.0,
            state_flow: policy.state_flow.as_ref().map_or(Vec::new(), |n| vec![0.0; n.num_params()]),
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrads, scale: f64) {
        for (a, b) in self.forward.iter_mut().zip(&other.forward) {
            *a += scale * b;
        }
        for (a, b) in self.backward.iter_mut().zip(&other.backward) {
            *a += scale * b;
        }
        self.log_z += scale * other.log_z;
        for (a, b) in self.state_flow.iter_mut().zip(&other.state_flow) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.forward.iter_mut().chain(self.backward.iter_mut()).chain(self.state_flow.iter_mut()).for_each(|g| *g *= s);
        self.log_z *= s;
    }

    /// All groups, flattened in order forward, backward, log_z, state_flow.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.forward.clone();
        out.extend_from_slice(&self.backward);
        out.push(self.log_z);
        out.extend_from_slice(&self.state_flow);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|g| g.is_finite())
    }
}

/// One policy decision at a state: the scored candidates and which one was taken.
#[derive(Clone, Debug)]
pub struct StepEval {
    pub probs: Vec<f64>,
    pub taken: usize,
    pub log_prob: f64,
    tapes: Vec<Tape>,
    /// False where the raw logit was clipped (zero gradient).
    unclipped: Vec<bool>,
}

/// Fixed-width one-hot layout: `L` slots of `A + 1` entries, the last entry
/// of each slot marking "empty". Returns the indices of the ones.
pub fn encode_state(env: &SequenceEnv, s: &SeqState, offset: usize, out: &mut Vec<usize>) {
    let width = env.alphabet_size() + 1;
    for slot in 0..env.length() {
        let t = s.tokens().get(slot).map_or(width - 1, |&t| t as usize);
        out.push(offset + slot * width + t);
    }
}

pub fn state_encoding_dim(env: &SequenceEnv) -> usize {
    env.length() * (env.alphabet_size() + 1)
}

fn edge_features(env: &SequenceEnv, parent: &SeqState, child: &SeqState) -> Vec<usize> {
    let mut active = Vec::with_capacity(2 * env.length());
    encode_state(env, parent, 0, &mut active);
    encode_state(env, child, state_encoding_dim(env), &mut active);
    active
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl SsrPolicy {
    pub fn new<R: Rng + ?Sized>(env: &SequenceEnv, config: &PolicyConfig, rng: &mut R) -> Result<Self> {
        if !config.log_z_init.is_finite() {
            return Err(Error::Invalid("log_z_init must be finite".into()));
        }
        if !(config.logit_clip > 0.0) {
            return Err(Error::Invalid("logit clip must be positive".into()));
        }
        let enc = state_encoding_dim(env);
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(&config.hidden);
            d.push(1);
            d
        };
        let forward_net = DenseNet::new(&dims(2 * enc), config.activation, rng)?;
        let backward = if config.uniform_backward {
            BackwardModel::Uniform
        } else {
            BackwardModel::Learned(DenseNet::new(&dims(2 * enc), config.activation, rng)?)
        };
        let state_flow = if config.state_flow {
            Some(DenseNet::new(&dims(enc), config.activation, rng)?)
        } else {
            None
        };
        Ok(Self { forward_net, backward, log_z: config.log_z_init, state_flow, logit_clip: config.logit_clip })
    }

    /// Policy whose every network outputs zero: uniform forward and backward.
    pub fn uniform(env: &SequenceEnv, uniform_backward: bool) -> Result<Self> {
        let enc = state_encoding_dim(env);
        Ok(Self {
            forward_net: DenseNet::zeros(&[2 * enc, 1], Activation::LeakyRelu)?,
            backward: if uniform_backward {
                BackwardModel::Uniform
            } else {
                BackwardModel::Learned(DenseNet::zeros(&[2 * enc, 1], Activation::LeakyRelu)?)
            },
            log_z: 0.0,
            state_flow: None,
            logit_clip: DEFAULT_LOGIT_CLIP,
        })
    }

    pub fn clip(&self, logit: f64) -> f64 {
        logit.clamp(-self.logit_clip, self.logit_clip)
    }

    fn score(&self, net: &DenseNet, env: &SequenceEnv, parent: &SeqState, child: &SeqState) -> Result<(f64, Tape)> {
        let (y, tape) = net.forward_onehot(&edge_features(env, parent, child))?;
        Ok((y[0], tape))
    }

    /// Scores `(parent, child)` pairs and returns clipped logits, clip mask and tapes.
    fn score_all(
        &self,
        net: &DenseNet,
        env: &SequenceEnv,
        pairs: impl Iterator<Item = (SeqState, SeqState)>,
    ) -> Result<(Vec<f64>, Vec<bool>, Vec<Tape>)> {
        let mut logits = Vec::new();
        let mut mask = Vec::new();
        let mut tapes = Vec::new();
        for (p, c) in pairs {
            let (raw, tape) = self.score(net, env, &p, &c)?;
            if !raw.is_finite() {
                return Err(Error::NonFinite(format!("edge logit {} -> {}", env.render(&p), env.render(&c))));
            }
            logits.push(self.clip(raw));
            mask.push(raw.abs() <= self.logit_clip);
            tapes.push(tape);
        }
        Ok((logits, mask, tapes))
    }

    /// Clipped logits without tapes, for sampling and evaluation.
    fn logits<'s>(
        &self,
        net: &DenseNet,
        env: &SequenceEnv,
        pairs: impl Iterator<Item = (&'s SeqState, &'s SeqState)>,
    ) -> Result<Vec<f64>> {
        pairs
            .map(|(p, c)| {
                let raw = net.value_onehot(&edge_features(env, p, c))?;
                if !raw.is_finite() {
                    return Err(Error::NonFinite(format!("edge logit {} -> {}", env.render(p), env.render(c))));
                }
                Ok(self.clip(raw))
            })
            .collect()
    }

    pub fn forward_dist(&self, env: &SequenceEnv, s: &SeqState) -> Result<(Vec<SeqState>, Vec<f64>)> {
        let children = env.children(s)?;
        let logits = self.logits(&self.forward_net, env, children.iter().map(|c| (s, c)))?;
        let probs = log_softmax(&logits).into_iter().map(f64::exp).collect();
        Ok((children, probs))
    }

    pub fn backward_dist(&self, env: &SequenceEnv, s: &SeqState) -> Result<(Vec<SeqState>, Vec<f64>)> {
        let parents = env.parents(s)?;
        let probs = match &self.backward {
            BackwardModel::Uniform => vec![1.0 / parents.len() as f64; parents.len()],
            BackwardModel::Learned(net) => {
                let logits = self.logits(net, env, parents.iter().map(|p| (p, s)))?;
                log_softmax(&logits).into_iter().map(f64::exp).collect()
            }
        };
        Ok((parents, probs))
    }

    /// `log P_F(next | s)` without tapes.
    pub fn forward_log_prob(&self, env: &SequenceEnv, s: &SeqState, next: &SeqState) -> Result<f64> {
        let (children, probs) = self.forward_dist(env, s)?;
        let taken = children.iter().position(|c| c == next).ok_or_else(|| Error::InvalidEdge {
            from: env.render(s),
            to: env.render(next),
        })?;
        Ok(probs[taken].ln())
    }

    /// `log P_B(prev | s)` without tapes.
    pub fn backward_log_prob(&self, env: &SequenceEnv, s: &SeqState, prev: &SeqState) -> Result<f64> {
        let parents = env.parents(s)?;
        let taken = parents.iter().position(|p| p == prev).ok_or_else(|| Error::InvalidEdge {
            from: env.render(prev),
            to: env.render(s),
        })?;
        match &self.backward {
            BackwardModel::Uniform => Ok(-(parents.len() as f64).ln()),
            BackwardModel::Learned(net) => {
                let logits = self.logits(net, env, parents.iter().map(|p| (p, s)))?;
                Ok(log_softmax(&logits)[taken])
            }
        }
    }

    /// Forward decision at `s` that moved to `next`, with tapes for backprop.
    pub fn forward_step(&self, env: &SequenceEnv, s: &SeqState, next: &SeqState) -> Result<StepEval> {
        let children = env.children(s)?;
        let taken = children.iter().position(|c| c == next).ok_or_else(|| Error::InvalidEdge {
            from: env.render(s),
            to: env.render(next),
        })?;
        let (logits, unclipped, tapes) =
            self.score_all(&self.forward_net, env, children.iter().map(|c| (s.clone(), c.clone())))?;
        let logp = log_softmax(&logits);
        Ok(StepEval { probs: logp.iter().map(|l| l.exp()).collect(), taken, log_prob: logp[taken], tapes, unclipped })
    }

    /// Backward decision at `s` that moved to its parent `prev`.
    pub fn backward_step(&self, env: &SequenceEnv, s: &SeqState, prev: &SeqState) -> Result<StepEval> {
        let parents = env.parents(s)?;
        let taken = parents.iter().position(|p| p == prev).ok_or_else(|| Error::InvalidEdge {
            from: env.render(prev),
            to: env.render(s),
        })?;
        match &self.backward {
            BackwardModel::Uniform => {
                let n = parents.len() as f64;
                Ok(StepEval {
                    probs: vec![1.0 / n; parents.len()],
                    taken,
                    log_prob: -n.ln(),
                    tapes: Vec::new(),
                    unclipped: Vec::new(),
                })
            }
            BackwardModel::Learned(net) => {
                let (logits, unclipped, tapes) =
                    self.score_all(net, env, parents.iter().map(|p| (p.clone(), s.clone())))?;
                let logp = log_softmax(&logits);
                Ok(StepEval {
                    probs: logp.iter().map(|l| l.exp()).collect(),
                    taken,
                    log_prob: logp[taken],
                    tapes,
                    unclipped,
                })
            }
        }
    }

    fn accumulate(net: &DenseNet, step: &StepEval, coeff: f64, grads: &mut [f64]) -> Result<()> {
        if coeff == 0.0 {
            return Ok(());
        }
        // d log p_taken / d logit_j = 1[j = taken] - p_j
        for (j, tape) in step.tapes.iter().enumerate() {
            if !step.unclipped[j] {
                continue;
            }
            let ind = if j == step.taken { 1.0 } else { 0.0 };
            net.backward(tape, &[coeff * (ind - step.probs[j])], grads)?;
        }
        Ok(())
    }

    /// Adds `coeff * grad(log P_F)` of a forward step into `grads`.
    pub fn accumulate_forward(&self, step: &StepEval, coeff: f64, grads: &mut PolicyGrads) -> Result<()> {
        Self::accumulate(&self.forward_net, step, coeff, &mut grads.forward)
    }

    /// Adds `coeff * grad(log P_B)`; a no-op for the uniform backward policy.
    pub fn accumulate_backward(&self, step: &StepEval, coeff: f64, grads: &mut PolicyGrads) -> Result<()> {
        match &self.backward {
            BackwardModel::Uniform => Ok(()),
            BackwardModel::Learned(net) => Self::accumulate(net, step, coeff, &mut grads.backward),
        }
    }

    /// `log F(s)` from the state-flow network.
    pub fn log_flow(&self, env: &SequenceEnv, s: &SeqState) -> Result<(f64, Tape)> {
        let net = self.state_flow.as_ref().ok_or(Error::MissingStateFlow("state flow"))?;
        let mut active = Vec::with_capacity(env.length());
        encode_state(env, s, 0, &mut active);
        let (y, tape) = net.forward_onehot(&active)?;
        Ok((y[0], tape))
    }

    pub fn accumulate_flow(&self, tape: &Tape, coeff: f64, grads: &mut PolicyGrads) -> Result<()> {
        let net = self.state_flow.as_ref().ok_or(Error::MissingStateFlow("state flow"))?;
        net.backward(tape, &[coeff], &mut grads.state_flow)
    }

    /// Sum of forward and backward log-probabilities along a path of edges.
    pub fn traj_logprobs(&self, env: &SequenceEnv, states: &[SeqState]) -> Result<(f64, f64)> {
        let mut log_pf = 0.0;
        let mut log_pb = 0.0;
        for w in states.windows(2) {
            if !env.is_edge(&w[0], &w[1]) {
                return Err(Error::InvalidEdge { from: env.render(&w[0]), to: env.render(&w[1]) });
            }
            log_pf += self.forward_log_prob(env, &w[0], &w[1])?;
            log_pb += self.backward_log_prob(env, &w[1], &w[0])?;
        }
        Ok((log_pf, log_pb))
    }

    /// Samples from `start` to a terminal state. With probability `epsilon`
    /// each action is uniform over children; log-probabilities are always
    /// those of the model's own `P_F` and `P_B`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        env: &SequenceEnv,
        start: &SeqState,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<(Vec<SeqState>, f64, f64)> {
        let mut states = vec![start.clone()];
        let mut log_pf = 0.0;
        let mut log_pb = 0.0;
        let mut s = start.clone();
        while !env.is_terminal(&s) {
            let (children, probs) = self.forward_dist(env, &s)?;
            let idx = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                rng.gen_range(0..children.len())
            } else {
                sample_index(&probs, rng)
            };
            log_pf += probs[idx].ln();
            let next = children[idx].clone();
            log_pb += self.backward_log_prob(env, &next, &s)?;
            states.push(next.clone());
            s = next;
        }
        Ok((states, log_pf, log_pb))
    }

    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        oracle: &RewardOracle,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let env = oracle.env();
        let (states, log_pf, log_pb) = self.rollout(env, &SeqState::initial(), epsilon, rng)?;
        let log_reward = oracle.log_reward(states.last().unwrap())?;
        Ok(Trajectory { states, log_pf, log_pb, log_reward })
    }

    /// Parameter groups in the order used by [`PolicyGrads::flat`].
    pub fn param_count(&self) -> usize {
        self.forward_net.num_params()
            + match &self.backward {
                BackwardModel::Learned(n) => n.num_params(),
                BackwardModel::Uniform => 0,
            }
            + 1
            + self.state_flow.as_ref().map_or(0, |n| n.num_params())
    }

    /// Reads the `k`-th parameter in flat order.
    pub fn param(&self, k: usize) -> f64 {
        let mut k = k;
        let f = self.forward_net.params();
        if k < f.len() {
            return f[k];
        }
        k -= f.len();
        if let BackwardModel::Learned(n) = &self.backward {
            if k < n.num_params() {
                return n.params()[k];
            }
            k -= n.num_params();
        }
        if k == 0 {
            return self.log_z;
        }
        k -= 1;
        self.state_flow.as_ref().expect("parameter index out of range").params()[k]
    }

    /// Writes the `k`-th parameter in flat order.
    pub fn set_param(&mut self, k: usize, value: f64) {
        let mut k = k;
        let nf = self.forward_net.num_params();
        if k < nf {
            self.forward_net.params_mut()[k] = value;
            return;
        }
        k -= nf;
        if let BackwardModel::Learned(n) = &mut self.backward {
            if k < n.num_params() {
                n.params_mut()[k] = value;
                return;
            }
            k -= n.num_params();
        }
        if k == 0 {
            self.log_z = value;
            return;
        }
        k -= 1;
        self.state_flow.as_mut().expect("parameter index out of range").params_mut()[k] = value;
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    if probs.len() == 1 {
        return 0;
    }
    WeightedIndex::new(probs).expect("probabilities are positive and finite").sample(rng)
}
