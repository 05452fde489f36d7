//! Flat run configuration shared by the trainer and the command line.
//!
//! Every key has a default, so an empty file describes the default synthetic
//! run. Unknown keys are rejected when deserializing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{
    load_reward_table, BuildMode, RawReward, RewardSpec, SequenceEnv, SyntheticLandscape, SyntheticSpec, TokenAlphabet,
    DEFAULT_ENUMERATION_CAP,
};
use crate::error::{Error, Result};
use crate::localsearch::{default_k, FilterKind, FilterRule, MhOrientation};
use crate::metrics::{MetricContext, ModeSpec, TargetOracle};
use crate::nn::Activation;
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::policy::PolicyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alphabet: String,
    pub length: usize,
    pub mode: BuildMode,
    /// `<sequence>,<value>` file; when absent the synthetic landscape is used.
    pub reward_table: Option<PathBuf>,
    pub synthetic_seed: u64,
    pub synthetic_modes: usize,
    pub synthetic_width: f64,
    pub synthetic_floor: f64,
    pub synthetic_min_separation: usize,
    pub scale_cap: Option<f64>,
    pub beta: f64,
    pub enumeration_cap: u64,

    pub objective: ObjectiveKind,
    pub subtb_lambda: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub log_z_init: f64,
    pub logit_clip: f64,

    /// Training rounds `T`.
    pub rounds: usize,
    /// Chains per round `M`.
    pub chains: usize,
    /// Refinement iterations per round `I`.
    pub iterations: usize,
    /// Destroy/rebuild depth; defaults to `(length + 1) / 2`.
    pub k: Option<usize>,
    pub epsilon: f64,
    pub filter: FilterKind,
    pub mh_orientation: MhOrientation,
    pub batch_size: usize,
    pub train_steps_per_round: usize,
    pub lr_log_z: f64,
    pub lr_policy: f64,
    pub grad_clip: f64,
    pub capacity: Option<usize>,

    pub eval_every: usize,
    pub eval_samples: usize,
    pub mode_quantile: f64,
    /// Absolute reward threshold; overrides `mode_quantile`.
    pub mode_threshold: Option<f64>,
    pub mode_min_separation: usize,
    pub mode_radius: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alphabet: "ACGT".into(),
            length: 8,
            mode: BuildMode::PrependAppend,
            reward_table: None,
            synthetic_seed: 0,
            synthetic_modes: 8,
            synthetic_width: 4.0,
            synthetic_floor: 1e-3,
            synthetic_min_separation: 4,
            scale_cap: Some(1.0),
            beta: 3.0,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            objective: ObjectiveKind::Tb,
            subtb_lambda: 0.9,
            hidden: vec![128],
            activation: Activation::LeakyRelu,
            log_z_init: 5.0,
            logit_clip: 50.0,
            rounds: 2000,
            chains: 4,
            iterations: 7,
            k: None,
            epsilon: 0.05,
            filter: FilterKind::Deterministic,
            mh_orientation: MhOrientation::Standard,
            batch_size: 16,
            train_steps_per_round: 1,
            lr_log_z: 1e-2,
            lr_policy: 1e-4,
            grad_clip: 10.0,
            capacity: None,
            eval_every: 10,
            eval_samples: 128,
            mode_quantile: 0.005,
            mode_threshold: None,
            mode_min_separation: 2,
            mode_radius: 1,
            seed: 0,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; a relative `reward_table` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Invalid(m) => Error::Invalid(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(table), Some(dir)) = (&cfg.reward_table, path.parent()) {
            if table.is_relative() {
                cfg.reward_table = Some(dir.join(table));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(field_err("length", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(field_err("rounds", "must be >= 1"));
        }
        if self.chains == 0 {
            return Err(field_err("chains", "must be >= 1"));
        }
        if self.k() > self.length {
            return Err(field_err("k", format!("{} exceeds length {}", self.k(), self.length)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(field_err("epsilon", format!("{} outside [0, 1]", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be >= 1"));
        }
        if !(self.lr_log_z >= 0.0 && self.lr_policy >= 0.0) {
            return Err(field_err("lr_policy", "learning rates must be >= 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(field_err("grad_clip", "must be positive"));
        }
        if !(self.beta >= 1.0) {
            return Err(field_err("beta", format!("{} must be >= 1", self.beta)));
        }
        if self.eval_every == 0 {
            return Err(field_err("eval_every", "must be >= 1"));
        }
        if !(self.mode_quantile > 0.0 && self.mode_quantile <= 1.0) {
            return Err(field_err("mode_quantile", "must be in (0, 1]"));
        }
        if self.mode_radius == 0 {
            return Err(field_err("mode_radius", "must be >= 1"));
        }
        if self.capacity == Some(0) {
            return Err(field_err("capacity", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(field_err("hidden", "layer widths must be >= 1"));
        }
        self.objective_config().validate()?;
        TokenAlphabet::new(&self.alphabet).map_err(|e| field_err("alphabet", e))?;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.length))
    }

    /// Reward-oracle calls per training round, `M * (I + 1)`.
    pub fn budget_per_round(&self) -> u64 {
        (self.chains * (self.iterations + 1)) as u64
    }

    pub fn filter_rule(&self) -> FilterRule {
        FilterRule { kind: self.filter, orientation: self.mh_orientation }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig { kind: self.objective, lambda: self.subtb_lambda }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.hidden.clone(),
            activation: self.activation,
            log_z_init: self.log_z_init,
            uniform_backward: self.objective == ObjectiveKind::MaxEnt,
            state_flow: self.objective.needs_state_flow(),
            logit_clip: self.logit_clip,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.synthetic_seed,
            n_modes: self.synthetic_modes,
            width: self.synthetic_width,
            floor: self.synthetic_floor,
            min_separation: self.synthetic_min_separation,
        }
    }

    pub fn build_env(&self) -> Result<SequenceEnv> {
        let alphabet = TokenAlphabet::new(&self.alphabet).map_err(|e| field_err("alphabet", e))?;
        let raw = match &self.reward_table {
            Some(path) => RawReward::Table(load_reward_table(path, &alphabet)?),
            None => RawReward::Synthetic(SyntheticLandscape::generate(&self.synthetic_spec(), alphabet.len(), self.length)?),
        };
        let reward = RewardSpec::new(raw, self.scale_cap, self.beta)?;
        Ok(SequenceEnv::new(alphabet, self.length, self.mode, reward)?.with_enumeration_cap(self.enumeration_cap))
    }

    /// Metric setup for `env`. Accuracy and quantile thresholds need an
    /// enumerable env; with an explicit `mode_threshold` modes are still
    /// counted on larger ones.
    pub fn metric_context(&self, env: &SequenceEnv) -> Result<MetricContext> {
        let oracle = if env.is_enumerable() { Some(TargetOracle::new(env)?) } else { None };
        let threshold = match (self.mode_threshold, &oracle) {
            (Some(t), _) => Some(t),
            (None, Some(o)) => Some(o.reward_quantile(self.mode_quantile)),
            (None, None) => None,
        };
        Ok(MetricContext {
            target_mean: oracle.as_ref().map(|o| o.target_mean()),
            threshold_modes: threshold
                .map(|threshold| ModeSpec::ThresholdSeparated { threshold, min_separation: self.mode_min_separation }),
            localopt_modes: threshold.map(|threshold| ModeSpec::LocalOptimum { threshold, radius: self.mode_radius }),
        })
    }
}
