//! End-to-end subcommand tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fedgcdr")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny_cfg(out: &Path) -> String {
    format!(
        r#"
seed = 5
out = "{}"

[pipeline]
t_rounds = 2
t_finetune = 1
eval_negatives = 15

[synth]
n_domains = 3
users_per_domain = 20
items_per_domain = 50
latent_dim = 4
overlap = 1.0
signals = ["shared-latent", "shared-latent", "pure-noise"]
density = 0.08
signal_scale = 3.0
seed = 5

[attack]
epsilons = [4.0, 64.0]
seeds = [0]
iterations = 60
restarts = 1
"#,
        out.display()
    )
}

#[test]
fn synth_writes_domains_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg.to_str().unwrap();

    let status = run(&["--config", cfg, "synth"]);
    assert!(status.status.success(), "{status:?}");
    for d in 0..3 {
        assert!(out.join("synth").join(format!("domain_{d}.csv")).exists());
    }
    assert!(out.join("synth/synth_manifest.json").exists());

    let first = std::fs::read(out.join("synth/domain_0.csv")).unwrap();
    let status = run(&["--config", cfg, "synth"]);
    assert!(status.status.success());
    let second = std::fs::read(out.join("synth/domain_0.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn synth_rejects_invalid_density_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let body = tiny_cfg(&out).replace("density = 0.08", "density = 1.5");
    let cfg = write_cfg(dir.path(), &body);
    let status = run(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn prepare_missing_file_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let body = format!(
        "{}\n[data]\ndomain_csvs = [\"/nonexistent/d0.csv\"]\n",
        tiny_cfg(&out)
    );
    let cfg = write_cfg(dir.path(), &body);
    let status = run(&["--config", cfg.to_str().unwrap(), "prepare"]);
    assert_eq!(status.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("/nonexistent/d0.csv"), "{stderr}");
}

#[test]
fn prepare_then_train_roundtrip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg_path.to_str().unwrap();
    assert!(run(&["--config", cfg, "synth"]).status.success());

    // prepare from the synthetic rating files
    let body = format!(
        r#"{}
[data]
domain_csvs = ["{}", "{}", "{}"]
"#,
        tiny_cfg(&out),
        out.join("synth/domain_0.csv").display(),
        out.join("synth/domain_1.csv").display(),
        out.join("synth/domain_2.csv").display(),
    );
    let cfg2 = dir.path().join("cfg2.toml");
    std::fs::write(&cfg2, body).unwrap();
    assert!(run(&["--config", cfg2.to_str().unwrap(), "prepare"]).status.success());
    assert!(out.join("prepared/registry.json").exists());
    let split0 = std::fs::read(out.join("prepared/domain_0.csv")).unwrap();
    assert!(run(&["--config", cfg2.to_str().unwrap(), "prepare"]).status.success());
    assert_eq!(split0, std::fs::read(out.join("prepared/domain_0.csv")).unwrap());

    // train from the prepared splits, twice; primary outputs byte-identical
    let body = format!(
        r#"{}
[data]
splits_dir = "{}"
"#,
        tiny_cfg(&out),
        out.join("prepared").display(),
    );
    let cfg3 = dir.path().join("cfg3.toml");
    std::fs::write(&cfg3, body).unwrap();
    assert!(run(&["--config", cfg3.to_str().unwrap(), "train"]).status.success());
    let metrics = std::fs::read(out.join("train/metrics.json")).unwrap();
    let ledger = std::fs::read(out.join("train/ledger.csv")).unwrap();
    assert!(run(&["--config", cfg3.to_str().unwrap(), "train"]).status.success());
    assert_eq!(metrics, std::fs::read(out.join("train/metrics.json")).unwrap());
    assert_eq!(ledger, std::fs::read(out.join("train/ledger.csv")).unwrap());

    // evaluate reproduces the training-time metrics
    assert!(run(&["--config", cfg3.to_str().unwrap(), "evaluate"]).status.success());
    let eval = std::fs::read(out.join("evaluate/metrics.json")).unwrap();
    assert_eq!(metrics, eval);
}

#[test]
fn mode_flags_select_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg_path.to_str().unwrap();
    for mode in ["full", "ablate-M", "ablate-T", "single-domain"] {
        let status = run(&["--config", cfg, "--mode", mode, "train"]);
        assert!(status.status.success(), "mode {mode}: {status:?}");
    }
    let status = run(&["--config", cfg, "--mode", "bogus", "train"]);
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn attack_sweep_writes_csv_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg_path.to_str().unwrap();
    assert!(run(&["--config", cfg, "attack"]).status.success());
    let csv = out.join("attack/leakage_sweep.csv");
    let first = std::fs::read_to_string(&csv).unwrap();
    assert!(first.starts_with(
        "epsilon,delta,seed,lambda,mean_user_leak,mean_item_leak,recon_error"
    ));
    assert_eq!(first.lines().count(), 1 + 2); // header + 2 eps x 1 seed
    assert!(run(&["--config", cfg, "attack"]).status.success());
    assert_eq!(first, std::fs::read_to_string(&csv).unwrap());
}

#[test]
fn cost_report_exact_match_and_sparse_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg_path.to_str().unwrap();
    let status = run(&["--config", cfg, "cost-report"]);
    assert!(status.status.success(), "{status:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cost/cost_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["exact_match"], serde_json::json!(true));

    // zero-round run costs exactly zero
    let body = tiny_cfg(&out)
        .replace("t_rounds = 2", "t_rounds = 0")
        .replace("t_finetune = 1", "t_finetune = 0");
    let cfg0 = dir.path().join("cfg0.toml");
    std::fs::write(&cfg0, body).unwrap();
    let status = run(&["--config", cfg0.to_str().unwrap(), "cost-report"]);
    assert!(status.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cost/cost_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["measured"]["total"], serde_json::json!(0));
    assert_eq!(report["exact_match"], serde_json::json!(true));

    // sparse uploads have no closed form
    let body = tiny_cfg(&out)
        .replace("eval_negatives = 15", "eval_negatives = 15\ndense_uploads = false");
    let cfg_sparse = dir.path().join("cfg_sparse.toml");
    std::fs::write(&cfg_sparse, body).unwrap();
    let status = run(&["--config", cfg_sparse.to_str().unwrap(), "cost-report"]);
    assert_eq!(status.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("dense"), "{stderr}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_cfg(dir.path(), &tiny_cfg(&out));
    let cfg = cfg_path.to_str().unwrap();
    assert!(run(&["--config", cfg, "train"]).status.success());
    let a = std::fs::read(out.join("train/metrics.json")).unwrap();
    assert!(run(&["--config", cfg, "--seed", "99", "train"]).status.success());
    let b = std::fs::read(out.join("train/metrics.json")).unwrap();
    assert_ne!(a, b);
}
