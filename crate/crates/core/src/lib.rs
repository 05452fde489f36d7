//! Local-search GFlowNets on prepend/append sequence MDPs.
//!
//! The crate trains reward-proportional samplers with trajectory balance,
//! detailed balance, sub-trajectory balance or MaxEnt objectives. Each
//! training round samples trajectories from the forward policy, refines them
//! by destroying a suffix with the backward policy and rebuilding it with the
//! forward policy, and trains on a reward-prioritized replay of everything
//! evaluated so far. Exact enumeration oracles in [`metrics`] back every
//! distributional check on small environments.

pub mod config;
pub mod env;
pub mod error;
pub mod localsearch;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod policy;
pub mod replay;
pub mod trainer;

pub use env::{BuildMode, RewardSpec, SeqState, SequenceEnv, TokenAlphabet};
pub use error::{Error, Result};
pub use localsearch::{FilterKind, FilterRule, MhOrientation, Proposal};
pub use metrics::{ModeSpec, TargetOracle};
pub use objectives::{ObjectiveConfig, ObjectiveKind};
pub use policy::{PolicyConfig, RewardOracle, SsrPolicy, Trajectory};
pub use replay::ReplayDataset;
pub use config::RunConfig;
pub use trainer::{Checkpoint, RoundLog, RunSummary, Trainer};
