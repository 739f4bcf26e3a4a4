use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pnnh_core::checkpoint::{load_coder, load_network};
use pnnh_core::config::RunConfig;

fn pnnh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnnh")).args(args).output().expect("binary runs")
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Header row and data rows of a report, after checking the hash comment.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    let hash = first.strip_prefix("# config_hash: ").unwrap_or_else(|| panic!("no hash line in {first:?}"));
    assert_eq!(hash.len(), 16);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = split(lines.next().unwrap());
    (header, lines.map(split).collect())
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn bounds_rows_carry_the_collapse_depths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = pnnh(&[
        "bounds", "--kind", "both", "--mu", "1", "--sigma", "0.1", "--delta", "0.1", "--eps", "0.01", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("bounds.csv"));
    let (kind, depth) = (column(&header, "kind"), column(&header, "collapse_depth"));
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][kind].as_str(), rows[0][depth].as_str()), ("plain", "3"));
    assert_eq!((rows[1][kind].as_str(), rows[1][depth].as_str()), ("residual", "65"));
    let bound: f64 = rows[1][column(&header, "survival_lower_bound")].parse().unwrap();
    assert!((bound - 1.21 / 1.3).abs() < 1e-9);
}

#[test]
fn bounds_grids_multiply_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o =
        pnnh(&["bounds", "--kind", "plain", "--mu", "0.5,1,2", "--sigma", "0.1", "--delta", "0.01,0.1", "--out", out]);
    assert!(o.status.success());
    assert_eq!(read_csv(&dir.path().join("bounds.csv")).1.len(), 6);
}

#[test]
fn unknown_flag_prints_usage_and_exits_two() {
    let o = pnnh(&["bounds", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_values_exit_non_zero_with_a_diagnostic() {
    let o = pnnh(&["bounds", "--delta=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
}

#[test]
fn gradcheck_passes() {
    let o = pnnh(&["gradcheck"]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn config_dump_is_a_complete_valid_config() {
    let o = pnnh(&["config", "dump"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, RunConfig::default());
    for key in ["bn_policy", "coder_task", "weight_decay", "momentum", "train_size", "widths"] {
        assert!(text.contains(key), "{key} missing from dump");
    }
}

#[test]
fn probe_is_deterministic_under_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let o = pnnh(&["probe", "--depth", "4", "--batch", "32", "--seed", "3", "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.join("probe.csv")).unwrap()
    };
    assert_eq!(run(a.path()), run(b.path()));
    let (header, rows) = read_csv(&a.path().join("probe.csv"));
    for name in ["layer", "kind", "surviving_fraction", "r2", "mean", "var"] {
        column(&header, name);
    }
    assert_eq!(rows.len(), 12);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("probe.json")).unwrap()).unwrap();
    assert_eq!(json["reports"].as_array().unwrap().len(), 3);
    assert!(json["config_hash"].is_string());
}

#[test]
fn train_coder_writes_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = pnnh(&["train-coder", "--c-in", "8", "--steps", "30", "--heldout", "100", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&dir.path().join("coder_loss.csv"));
    assert_eq!(rows.len(), 30);
    let (coder, meta) = load_coder(&dir.path().join("coder.ckpt")).unwrap();
    assert_eq!(coder.spec.c_in, 8);
    assert!(meta.metrics.contains_key("heldout_loss"));
}

const TINY: &str = r#"
[data]
source_split = "test"
train_size = 200
val_size = 100

[network]
kind = "pnnh"
widths = [4, 8]
blocks_per_stage = 1

[train]
epochs = 2
batch_size = 32

[train.coder]
steps = 20
"#;

#[test]
fn train_is_deterministic_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let root = mnist_dir();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = pnnh(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data-root",
            root.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    let (header, rows) = read_csv(&a.join("metrics.csv"));
    assert_eq!(header, ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"]);
    assert_eq!(rows.len(), 2);
    let (net, meta) = load_network(&a.join("network.ckpt")).unwrap();
    assert_eq!(meta.epoch, 2);
    assert_eq!(meta.seed, 5);
    assert_eq!(net.spec.widths, vec![4, 8]);
    let saved = RunConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(saved.hash(), meta.config_hash);
}

#[test]
fn config_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = pnnh(&["train", "--config", cfg.to_str().unwrap(), "--data-root", "."]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_data_root_is_reported() {
    let o = Command::new(env!("CARGO_BIN_EXE_pnnh")).args(["train"]).env_remove("PNNH_DATA").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("PNNH_DATA"));
}

#[test]
fn pretext_ablation_orders_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = pnnh(&["ablate-pretext", "--tasks", "rectified_normal,identity,normal", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("pretext.csv"));
    let loss = column(&header, "heldout_loss");
    let by_task: Vec<(String, f64)> = rows.iter().map(|r| (r[0].clone(), r[loss].parse().unwrap())).collect();
    assert_eq!(by_task.iter().map(|t| t.0.as_str()).collect::<Vec<_>>(), ["rectified_normal", "identity", "normal"]);
    assert!(by_task[0].1 < by_task[1].1 && by_task[1].1 < by_task[2].1, "{by_task:?}");
}
