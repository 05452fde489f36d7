//! Multi-seed comparison of config variants.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lsgfn::RunConfig;

use crate::artifacts::{load_config, run_dir, train_into};
use crate::{io_err, CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

/// Splits on commas outside brackets.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Parses `label:key=value,key=value` against `base`. Values are read as
/// TOML literals and fall back to bare strings, so `filter=stochastic` and
/// `hidden=[64,64]` both work.
pub fn parse_variant(spec: &str, base: &RunConfig) -> CliResult<Variant> {
    let (label, overrides) = spec.split_once(':').unwrap_or((spec, ""));
    if label.is_empty() {
        return Err(CliError::Input(format!("variant {spec:?} has an empty label")));
    }
    let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("config round-trips through toml");
    for pair in split_top_level(overrides).into_iter().map(str::trim).filter(|p| !p.is_empty()) {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("variant {label}: expected key=value, got {pair:?}")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), value);
    }
    let config = RunConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
        .map_err(|e| CliError::Input(format!("variant {label}: {e}")))?;
    Ok(Variant { label: label.to_string(), config })
}

pub fn default_variants(base: &RunConfig) -> Vec<Variant> {
    vec![
        Variant { label: "tb".into(), config: RunConfig { iterations: 0, chains: 32, ..base.clone() } },
        Variant { label: "tb+ls".into(), config: RunConfig { iterations: 7, chains: 4, ..base.clone() } },
    ]
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct Row {
    variant: Variant,
    accuracy: Vec<f64>,
    modes: Vec<f64>,
    top100: Vec<f64>,
}

fn render_table(rows: &[Row]) -> String {
    let mut s = String::new();
    s.push_str("| variant | objective | filter | I | M | budget | accuracy | modes | top-100 |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let cell = |xs: &[f64]| {
        if xs.is_empty() {
            "-".to_string()
        } else {
            let (m, sd) = mean_std(xs);
            format!("{m:.2} ± {sd:.2}")
        }
    };
    for r in rows {
        let c = &r.variant.config;
        let filter = if c.iterations == 0 { "-".to_string() } else { format!("{:?}", c.filter).to_lowercase() };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.variant.label,
            c.objective.name(),
            filter,
            c.iterations,
            c.chains,
            c.budget_per_round(),
            cell(&r.accuracy),
            cell(&r.modes),
            cell(&r.top100)
        );
    }
    s
}

pub fn compare(config: &Path, out: &Path, specs: &[String], seeds: &[u64]) -> CliResult<()> {
    if seeds.is_empty() {
        return Err(CliError::Input("--seeds must name at least one seed".into()));
    }
    let base = load_config(config, None)?;
    let variants = if specs.is_empty() {
        default_variants(&base)
    } else {
        specs.iter().map(|s| parse_variant(s, &base)).collect::<CliResult<Vec<_>>>()?
    };
    let mut rows = Vec::new();
    for variant in variants {
        let mut row = Row { variant, accuracy: Vec::new(), modes: Vec::new(), top100: Vec::new() };
        for &seed in seeds {
            let cfg = RunConfig { seed, ..row.variant.config.clone() };
            let dir = run_dir(out, &row.variant.label, seed);
            eprintln!("{} seed {seed} -> {}", row.variant.label, dir.display());
            let summary = train_into(cfg, &dir, true)?;
            if let Some(m) = summary.final_metrics {
                row.accuracy.extend(m.accuracy);
                row.modes.extend(m.n_modes_threshold.map(|n| n as f64));
                row.top100.push(m.top100_mean);
            }
        }
        rows.push(row);
    }
    let table = render_table(&rows);
    fs::create_dir_all(out).map_err(|e| io_err(out.display(), e))?;
    fs::write(out.join("compare.md"), &table).map_err(|e| io_err(out.display(), e))?;
    print!("{table}");
    Ok(())
}
