//! Run directory layout and file formats.
//!
//! A training run writes `manifest.json`, `rounds.csv`, `checkpoint.json`
//! and `summary.json` into its output directory. A run that stops on a
//! non-finite loss still writes the checkpoint of the last good round plus
//! `failure.txt`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lsgfn::env::RawReward;
use lsgfn::{BuildMode, RoundLog, RunConfig, RunSummary, SequenceEnv, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{io_err, CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Bumped whenever the `rounds.csv` columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub alphabet: String,
    pub length: usize,
    pub mode: BuildMode,
    /// `table` or `synthetic`.
    pub reward_source: String,
    pub reward_table_sha256: Option<String>,
    pub n_terminals: f64,
    pub max_raw_reward: f64,
    /// Factor applied to raw rewards before the exponent.
    pub reward_normalization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub csv_schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub env: EnvFingerprint,
    pub weight_init: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

#[derive(Serialize)]
struct CsvRow {
    round: usize,
    loss: f64,
    accept_rate: Option<f64>,
    oracle_calls: u64,
    dataset_size: usize,
    accuracy: Option<f64>,
    n_modes_threshold: Option<usize>,
    n_modes_localopt: Option<usize>,
    top100_mean: Option<f64>,
    unique_fraction: Option<f64>,
    diversity: Option<f64>,
}

impl From<&RoundLog> for CsvRow {
    fn from(log: &RoundLog) -> Self {
        let m = log.metrics.as_ref();
        CsvRow {
            round: log.round,
            loss: log.loss,
            accept_rate: log.accept_rate,
            oracle_calls: log.oracle_calls,
            dataset_size: log.dataset_size,
            accuracy: m.and_then(|m| m.accuracy),
            n_modes_threshold: m.and_then(|m| m.n_modes_threshold),
            n_modes_localopt: m.and_then(|m| m.n_modes_localopt),
            top100_mean: m.map(|m| m.top100_mean),
            unique_fraction: m.map(|m| m.unique_fraction),
            diversity: m.map(|m| m.diversity),
        }
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn fingerprint(config: &RunConfig, env: &SequenceEnv) -> CliResult<EnvFingerprint> {
    let (source, hash) = match (env.reward_spec().raw(), &config.reward_table) {
        (RawReward::Table(_), Some(path)) => ("table", Some(sha256_file(path)?)),
        (RawReward::Table(_), None) => ("table", None),
        (RawReward::Synthetic(_), _) => ("synthetic", None),
    };
    Ok(EnvFingerprint {
        alphabet: config.alphabet.clone(),
        length: env.length(),
        mode: env.mode(),
        reward_source: source.into(),
        reward_table_sha256: hash,
        n_terminals: env.n_terminals(),
        max_raw_reward: env.reward_spec().max_raw(),
        reward_normalization: env.reward_spec().normalization(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path.display(), e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| io_err(path.display(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Loads a config and applies a seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Trains `config` into `out`, writing every artifact. `quiet` suppresses
/// the per-evaluation progress lines.
pub fn train_into(config: RunConfig, out: &Path, quiet: bool) -> CliResult<RunSummary> {
    let env = config.build_env()?;
    let fingerprint = fingerprint(&config, &env)?;
    fs::create_dir_all(out).map_err(|e| io_err(out.display(), e))?;
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        csv_schema_version: CSV_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config: config.clone(),
        env: fingerprint,
        weight_init: "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases".into(),
        started_unix: now_unix(),
        finished_unix: None,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let mut trainer = Trainer::with_env(config, env)?;
    let csv_path = out.join("rounds.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| io_err(csv_path.display(), e))?;
    while !trainer.is_done() {
        let log = match trainer.round() {
            Ok(log) => log,
            Err(e) => {
                csv.flush().map_err(|e| io_err(csv_path.display(), e))?;
                write_json(&out.join("checkpoint.json"), &trainer.checkpoint())?;
                let note = format!("stopped after round {}: {e}\n", trainer.round_index());
                fs::write(out.join("failure.txt"), &note).map_err(|e| io_err(out.display(), e))?;
                return Err(CliError::Runtime(format!("{e}; checkpoint written to {}", out.display())));
            }
        };
        csv.serialize(CsvRow::from(&log)).map_err(|e| io_err(csv_path.display(), e))?;
        if let (Some(m), false) = (&log.metrics, quiet) {
            eprintln!(
                "round {:>5}  loss {:.4}  accuracy {}  modes {}  top100 {:.4}",
                log.round,
                log.loss,
                m.accuracy.map_or("-".into(), |a| format!("{a:.2}")),
                m.n_modes_threshold.map_or("-".into(), |n| n.to_string()),
                m.top100_mean
            );
        }
    }
    csv.flush().map_err(|e| io_err(csv_path.display(), e))?;

    write_json(&out.join("checkpoint.json"), &trainer.checkpoint())?;
    let summary = trainer.summary();
    write_json(&out.join("summary.json"), &summary)?;
    manifest.finished_unix = Some(now_unix());
    write_json(&manifest_path, &manifest)?;
    Ok(summary)
}

pub fn run_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    root.join(safe).join(format!("seed-{seed}"))
}
