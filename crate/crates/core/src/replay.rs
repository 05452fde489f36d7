//! Training dataset with reward-prioritized replay.
//!
//! Entries are ranked by `(log_reward, insertion sequence)`, so equal rewards
//! favour the more recent entry. The top `ceil(0.1 * |D|)` ranks form the
//! priority set. Two heaps keep the split current in `O(log n)` per insert:
//! a min-heap over the priority set and a max-heap over the remainder.
//! Uniform draws index straight into each heap's backing slice.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    StepA,
    ProposalAccepted,
    ProposalRejected,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::StepA => "step-a",
            Origin::ProposalAccepted => "proposal-accepted",
            Origin::ProposalRejected => "proposal-rejected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub traj: Trajectory,
    pub round: usize,
    pub origin: Origin,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug)]
struct Rank {
    log_reward: f64,
    seq: u64,
}

impl PartialEq for Rank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Rank {}

impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rank {
    fn cmp(&self, other: &Self) -> Ordering {
        self.log_reward.total_cmp(&other.log_reward).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReplayDataset {
    entries: VecDeque<ReplayEntry>,
    capacity: Option<usize>,
    next_seq: u64,
    top: BinaryHeap<Reverse<Rank>>,
    rest: BinaryHeap<Rank>,
}

/// Size of the priority set for a dataset of `n` entries.
pub fn top_set_size(n: usize) -> usize {
    n.div_ceil(10)
}

impl ReplayDataset {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { capacity, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    fn get(&self, seq: u64) -> &ReplayEntry {
        let first = self.entries.front().expect("non-empty").seq;
        &self.entries[(seq - first) as usize]
    }

    pub fn insert(&mut self, traj: Trajectory, round: usize, origin: Origin) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let rank = Rank { log_reward: traj.log_reward, seq };
        self.entries.push_back(ReplayEntry { traj, round, origin, seq });
        if let Some(cap) = self.capacity {
            if self.entries.len() > cap {
                self.entries.pop_front();
                self.rebuild();
                return;
            }
        }
        match self.top.peek() {
            Some(Reverse(min_top)) if rank < *min_top => self.rest.push(rank),
            _ => self.top.push(Reverse(rank)),
        }
        self.rebalance();
    }

    fn rebalance(&mut self) {
        let want = top_set_size(self.entries.len());
        while self.top.len() > want {
            let Reverse(r) = self.top.pop().unwrap();
            self.rest.push(r);
        }
        while self.top.len() < want {
            let r = self.rest.pop().unwrap();
            self.top.push(Reverse(r));
        }
        // keep every priority rank above every remainder rank
        while let (Some(Reverse(lo)), Some(hi)) = (self.top.peek(), self.rest.peek()) {
            if lo >= hi {
                break;
            }
            let Reverse(lo) = self.top.pop().unwrap();
            let hi = self.rest.pop().unwrap();
            self.top.push(Reverse(hi));
            self.rest.push(lo);
        }
    }

    // O(n); only reached when a capacity is set and an entry is evicted.
    fn rebuild(&mut self) {
        let mut ranks: Vec<Rank> =
            self.entries.iter().map(|e| Rank { log_reward: e.traj.log_reward, seq: e.seq }).collect();
        ranks.sort_unstable_by(|a, b| b.cmp(a));
        let k = top_set_size(ranks.len());
        self.rest = ranks.split_off(k).into_iter().collect();
        self.top = ranks.into_iter().map(Reverse).collect();
    }

    /// The priority set, highest rank first.
    pub fn top_entries(&self) -> Vec<&ReplayEntry> {
        let mut r: Vec<Rank> = self.top.iter().map(|Reverse(r)| *r).collect();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r.into_iter().map(|r| self.get(r.seq)).collect()
    }

    pub fn rest_entries(&self) -> Vec<&ReplayEntry> {
        self.rest.iter().map(|r| self.get(r.seq)).collect()
    }

    /// Half the batch uniformly (with replacement) from the priority set and
    /// half from the remainder; the odd draw goes to the priority set. With
    /// an empty remainder every draw comes from the priority set.
    pub fn sample_prt<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Trajectory>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let top = self.top.as_slice();
        let rest = self.rest.as_slice();
        let n_rest = if rest.is_empty() { 0 } else { batch_size / 2 };
        let n_top = batch_size - n_rest;
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..n_top {
            let Reverse(r) = top[rng.gen_range(0..top.len())];
            out.push(&self.get(r.seq).traj);
        }
        for _ in 0..n_rest {
            let r = rest[rng.gen_range(0..rest.len())];
            out.push(&self.get(r.seq).traj);
        }
        Ok(out)
    }
}
