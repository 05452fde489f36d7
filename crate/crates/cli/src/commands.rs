use std::fs;
use std::path::Path;

use lsgfn::metrics::find_modes;
use lsgfn::trainer::evaluate;
use lsgfn::{Checkpoint, ModeSpec, SeqState, SequenceEnv, TargetOracle};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{load_config, read_json, train_into, write_json};
use crate::{io_err, CliError, CliResult};

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let config = load_config(config, seed)?;
    let summary = train_into(config, out, false)?;
    let m = summary.final_metrics.as_ref();
    println!(
        "rounds {}  oracle calls {}  accuracy {}  modes {}  -> {}",
        summary.rounds_completed,
        summary.oracle_calls,
        m.and_then(|m| m.accuracy).map_or("-".into(), |a| format!("{a:.2}")),
        m.and_then(|m| m.n_modes_threshold).map_or("-".into(), |n| n.to_string()),
        out.display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, n: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let ckpt: Checkpoint = read_json(checkpoint)?;
    let env = ckpt.config.build_env()?;
    let context = ckpt.config.metric_context(&env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (samples, bundle) = evaluate(&ckpt.policy, &env, &context, n, &mut rng)?;
    let json = serde_json::to_string_pretty(&bundle).expect("metrics serialize");
    println!("{json}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir.display(), e))?;
        write_json(&dir.join("metrics.json"), &bundle)?;
        let path = dir.join("samples.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(path.display(), e))?;
        w.write_record(["sequence", "reward"]).map_err(|e| io_err(path.display(), e))?;
        for (x, r) in &samples {
            w.write_record([env.render(x), r.to_string()]).map_err(|e| io_err(path.display(), e))?;
        }
        w.flush().map_err(|e| io_err(path.display(), e))?;
    }
    Ok(())
}

fn print_modes(env: &SequenceEnv, title: &str, modes: &[(SeqState, f64)]) {
    println!("{title}: {}", modes.len());
    for (x, r) in modes {
        println!("  {} {r:.6}", env.render(x));
    }
}

fn mode_specs(config: &lsgfn::RunConfig, env: &SequenceEnv) -> CliResult<(ModeSpec, ModeSpec)> {
    let ctx = config.metric_context(env)?;
    match (ctx.threshold_modes, ctx.localopt_modes) {
        (Some(t), Some(l)) => Ok((t, l)),
        _ => Err(CliError::Input("mode_threshold is required when the environment cannot be enumerated".into())),
    }
}

fn spec_title(spec: &ModeSpec) -> String {
    match spec {
        ModeSpec::ThresholdSeparated { threshold, min_separation } => {
            format!("modes (reward >= {threshold:.6}, hamming separation >= {min_separation})")
        }
        ModeSpec::LocalOptimum { threshold, radius } => {
            format!("local optima (reward >= {threshold:.6}, hamming radius {radius})")
        }
    }
}

pub fn oracle(config: &Path) -> CliResult<()> {
    let config = load_config(config, None)?;
    let env = config.build_env()?;
    let oracle = TargetOracle::new(&env)?;
    println!("terminals {}", oracle.terminals().len());
    println!("z {}", oracle.z());
    println!("target_mean {}", oracle.target_mean());
    for q in [0.001, 0.005, 0.01, 0.1, 0.5] {
        println!("reward_top_{q} {}", oracle.reward_quantile(q));
    }
    let all: Vec<SeqState> = oracle.terminals().iter().map(|(x, _)| x.clone()).collect();
    let (threshold, localopt) = mode_specs(&config, &env)?;
    print_modes(&env, &spec_title(&threshold), &find_modes(&all, &threshold, &env)?);
    print_modes(&env, &spec_title(&localopt), &find_modes(&all, &localopt, &env)?);
    Ok(())
}

/// Sequences from the first column of `text`; a first line that does not
/// parse is treated as a header.
fn read_samples(text: &str, env: &SequenceEnv, path: &Path) -> CliResult<Vec<SeqState>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match env.alphabet().parse(field) {
            Ok(x) if x.len() == env.length() => out.push(x),
            Ok(_) if i == 0 => {}
            Err(_) if i == 0 => {}
            Ok(_) => {
                return Err(CliError::Input(format!(
                    "{}:{}: {field:?} does not have length {}",
                    path.display(),
                    i + 1,
                    env.length()
                )))
            }
            Err(e) => return Err(CliError::Input(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

pub fn modes(config: &Path, samples: &Path) -> CliResult<()> {
    let config = load_config(config, None)?;
    let env = config.build_env()?;
    let text = fs::read_to_string(samples)
        .map_err(|e| CliError::Input(format!("cannot read samples {}: {e}", samples.display())))?;
    let xs = read_samples(&text, &env, samples)?;
    println!("samples {}", xs.len());
    let (threshold, localopt) = mode_specs(&config, &env)?;
    print_modes(&env, &spec_title(&threshold), &find_modes(&xs, &threshold, &env)?);
    print_modes(&env, &spec_title(&localopt), &find_modes(&xs, &localopt, &env)?);
    Ok(())
}
