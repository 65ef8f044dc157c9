use std::fs;
use std::path::Path;
use std::process::Command;

use fedsim::cli::{self, ExperimentConfig};

const SMALL: &str = r#"
seed = 5
rounds = 6
clients_per_round = 3

[dataset]
kind = "synthetic"
n_classes = 2
dim = 4
per_class = 30
test_per_class = 20

[partition]
scheme = "one_class"
n_clients = 6

[model]
layer_dims = [4, 8, 2]

[train]
algorithm = "fedreg"
epochs = 2
batch_size = 5
learning_rate = 0.1
gamma = 0.5
eta_s = 0.1

[diagnostics]
forgetting = true
fisher = true
compare_with = "fedavg"

[attack]
targets = 2
iterations = 40
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn fedsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn binary_run_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for (workers, name) in [("1", "w1"), ("8", "w8"), ("8", "w8b")] {
        let out = dir.path().join(name);
        let res = fedsim(&["run", "--config", cfg.to_str().unwrap(), "--workers", workers, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        assert!(String::from_utf8_lossy(&res.stdout).contains("fedreg: final accuracy"));
        outputs.push(fs::read(out.join("rounds.csv")).unwrap());
        let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["rounds"], 6);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(cli::commands::ROUNDS_HEADER));
    assert_eq!(lines.count(), 6);
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(fedsim(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(fedsim(&["run", "--config", cfg.to_str().unwrap(), "--seed", "6", "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("rounds.csv")).unwrap(), fs::read(b.join("rounds.csv")).unwrap());
    let echoed = ExperimentConfig::load(b.join("config.toml")).unwrap();
    assert_eq!(echoed.seed, 6);
}

#[test]
fn invalid_config_fails_with_named_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("gamma = 0.5", "gamma = 1.5"));
    let res = fedsim(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("gamma"));

    let cfg = write_config(dir.path(), &SMALL.replace("rounds = 6", "rounds = 6\nrundos = 1"));
    let res = fedsim(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("rundos"));

    let res = fedsim(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!res.status.success());
}

#[test]
fn partition_stats_reports_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("p");
    let res = fedsim(&["partition-stats", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("clients: 6"), "{stdout}");
    assert!(stdout.contains("classes per client: 1 (6 clients)"), "{stdout}");
    let csv = fs::read_to_string(out.join("partition.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("partition.json")).unwrap()).unwrap();
    assert_eq!(json["total_examples"], 60);
}

#[test]
fn diagnose_writes_main_and_shadow_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
    let out = dir.path().join("d");
    let records = cli::cmd_diagnose(&cfg, &out).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records[0].mean_increment.is_none());
    assert!(records[1..].iter().all(|r| r.mean_increment.is_some() && r.shadow_mean_increment.is_some()));
    let forgetting = fs::read_to_string(out.join("forgetting.csv")).unwrap();
    assert!(forgetting.lines().any(|l| l.contains(",main,")));
    assert!(forgetting.lines().any(|l| l.contains(",shadow,")));
    assert!(out.join("fisher_layers.csv").exists());
}

#[test]
fn attack_writes_psnr_table_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("atk");
    let res = fedsim(&["attack", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    for d in ["plain", "dpsgd", "fedreg_mg"] {
        assert!(stdout.contains(&format!("{d}: mean PSNR")), "{stdout}");
        let pgm = fs::read(out.join(format!("recon_{d}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n"));
    }
    let csv = fs::read_to_string(out.join("psnr.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("target,label,defense,recovered_label,psnr_db,objective"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(out.join("truth.pgm").exists());
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.model_spec().unwrap();
            n += 1;
        }
    }
    assert!(n >= 1);
}
