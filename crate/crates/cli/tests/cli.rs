use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsgfn::{Checkpoint, RunSummary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsgfn"))
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let table = dir.join("tiny.csv");
    std::fs::copy(tiny_config().with_file_name("tiny.csv"), &table).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn train(config: &Path, out: &Path) -> Output {
    run(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn bundled_tiny_config_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = train(&tiny_config(), &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "rounds.csv", "checkpoint.json", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "round,loss,accept_rate,oracle_calls,dataset_size,accuracy,n_modes_threshold,n_modes_localopt,top100_mean,unique_fraction,diversity"
    );
    assert_eq!(lines.len(), 1 + 200);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 11, "{line}");
    }
    // budget 2 * (1 + 1) per round
    assert!(lines[200].split(',').nth(3) == Some("800"), "{}", lines[200]);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let table_hash = manifest["env"]["reward_table_sha256"].as_str().unwrap();
    assert_eq!(table_hash.len(), 64);
    assert!(manifest["finished_unix"].is_u64());
}

#[test]
fn rerun_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &std::fs::read_to_string(tiny_config()).unwrap().replace("rounds = 200", "rounds = 60"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(train(&cfg, &a).status.success());
    assert!(train(&cfg, &b).status.success());
    let ra = std::fs::read(a.join("rounds.csv")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("rounds.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(b.join("checkpoint.json")).unwrap());

    let c = tmp.path().join("c");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(ra, std::fs::read(c.join("rounds.csv")).unwrap());
}

#[test]
fn summary_json_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &std::fs::read_to_string(tiny_config()).unwrap().replace("rounds = 200", "rounds = 30"));
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let summary: RunSummary = serde_json::from_str(&text).unwrap();
    let again: RunSummary = serde_json::from_str(&serde_json::to_string(&summary).unwrap()).unwrap();
    assert_eq!(summary, again);
    assert_eq!(summary.oracle_calls, 30 * 4);
    let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt.round, 30);
}

#[test]
fn missing_reward_table_exits_2_and_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "alphabet = \"AB\"\nlength = 2\nreward_table = \"nowhere.csv\"\n").unwrap();
    let o = train(&cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&tmp.path().join("nowhere.csv").display().to_string()), "{}", stderr(&o));
}

#[test]
fn invalid_field_exits_2_with_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "epsilon = 1.5\n").unwrap();
    let o = train(&cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));

    std::fs::write(&cfg, "itertions = 3\n").unwrap();
    let o = train(&cfg, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("itertions"), "{}", stderr(&o));
}

#[test]
fn oracle_on_tiny_env() {
    let o = run(&["oracle", "--config", tiny_config().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    // sum r^2 / sum r = 30 / 10
    let mean: f64 = out.lines().find_map(|l| l.strip_prefix("target_mean ")).unwrap().parse().unwrap();
    assert!((mean - 3.0).abs() < 1e-12, "{out}");
    assert!(out.contains("terminals 4"));
    assert!(out.contains("local optima (reward >= 4.000000, hamming radius 1): 1\n  BB"), "{out}");
}

#[test]
fn oracle_lists_planted_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("planted.toml");
    std::fs::write(
        &cfg,
        "alphabet = \"ACGT\"\nlength = 6\nsynthetic_modes = 4\nsynthetic_width = 1.0\nsynthetic_min_separation = 3\nmode_threshold = 0.5\nmode_min_separation = 3\n",
    )
    .unwrap();
    let o = run(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("hamming separation >= 3): 4\n"), "{out}");
    assert!(out.contains("hamming radius 1): 4\n"), "{out}");
}

#[test]
fn oracle_refuses_large_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("big.toml");
    std::fs::write(&cfg, "alphabet = \"ACGT\"\nlength = 14\n").unwrap();
    let o = run(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cap"), "{}", stderr(&o));
}

#[test]
fn eval_and_modes_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &std::fs::read_to_string(tiny_config()).unwrap().replace("rounds = 200", "rounds = 20"));
    let out = tmp.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let eval_dir = tmp.path().join("eval");
    let o = run(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.json").to_str().unwrap(),
        "--samples",
        "50",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics["n_samples"], 50);
    let samples = eval_dir.join("samples.csv");
    assert_eq!(std::fs::read_to_string(&samples).unwrap().lines().count(), 51);

    let o = run(&["modes", "--config", cfg.to_str().unwrap(), "--samples", samples.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("samples 50"));

    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "AB\nAXB\n").unwrap();
    let o = run(&["modes", "--config", cfg.to_str().unwrap(), "--samples", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn compare_runs_every_variant_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &std::fs::read_to_string(tiny_config()).unwrap().replace("rounds = 200", "rounds = 20"));
    let out = tmp.path().join("cmp");
    let o = run(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("| tb | tb | - | 0 | 32 | 32 |"), "{table}");
    assert!(table.contains("| tb+ls | tb | deterministic | 7 | 4 | 32 |"), "{table}");
    for v in ["tb", "tb_ls"] {
        for s in [0, 1] {
            assert!(out.join(v).join(format!("seed-{s}")).join("rounds.csv").exists());
        }
    }
    assert!(out.join("compare.md").exists());
}
