//! Shared fixtures for the benchmarks.

use lsgfn::{RunConfig, SequenceEnv};

/// The default synthetic task: 4 tokens, length 8, 8 planted modes.
pub fn bench_config() -> RunConfig {
    RunConfig { rounds: usize::MAX, eval_every: usize::MAX, ..RunConfig::default() }
}

pub fn bench_env() -> SequenceEnv {
    bench_config().build_env().expect("default config builds")
}
