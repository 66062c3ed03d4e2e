use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5
[data]
n = 120
l_ts = 10
[federation]
clients = 4
participation = 0.5
rounds = 3
checkpoint_every = 2
[model]
embed_dim = 4
context_dim = 4
expert_hidden = 6
denoiser_hidden = 8
denoiser_blocks = 1
time_embed_dim = 4
encoder_width = 6
classifier_hidden = 6
[diffusion]
steps = 6
"#;

fn fedcondi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcondi"))
        .args(args)
        .current_dir(dir)
        .env_remove("FEDCONDI_OUT")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reports_rounds_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = fedcondi(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["rounds"], 3);
    assert_eq!(metrics["round_losses"].as_array().unwrap().len(), 3);
    let rounds = fs::read_to_string(out.join("reports/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    assert!(out.join("ckpt/round_2.bin").exists());
    assert!(out.join("ckpt/round_3.bin").exists());
    let csv = fs::read_to_string(out.join("feature_distances.csv")).unwrap();
    assert!(csv.starts_with("sample_id,d_zero_l2,d_imp_l2,d_zero_cos,d_imp_cos\n"));
    assert_eq!(csv.lines().count() - 1, metrics["analysis_samples"].as_u64().unwrap() as usize);
}

#[test]
fn seed_flag_changes_results_and_env_sets_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let env_out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_fedcondi"))
        .args(["run", "--config", &cfg, "--seed", "9"])
        .env("FEDCONDI_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(env_out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 9);
}

#[test]
fn ablation_sweep_writes_one_report_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("sweep");
    let o = fedcondi(
        &["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--ablate", "no_imputation,no_cond"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for variant in ["full", "no_imputation", "no_cond", "no_imputation+no_cond"] {
        let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join(variant).join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m["variant"], variant);
    }
}

#[test]
fn grid_summary_has_one_row_per_cell_and_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("grid");
    let o = fedcondi(
        &["grid", "--config", &cfg, "--out", out.to_str().unwrap(), "--ps", "0.2,0.8", "--pw", "0.2,0.8", "--ablate", "no_cond"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("grid_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // 2 · 2 cells, each with `full` plus one ablation.
    assert_eq!(rows.len(), 2 * 2 * (1 + 1));
    let seeds: std::collections::HashSet<&str> = rows.iter().map(|r| r.get(2).unwrap()).collect();
    assert_eq!(seeds.len(), 4);
}

#[test]
fn analyze_uses_the_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(fedcondi(&["run", "--config", &cfg, "--out", out_s], dir.path()).status.success());
    let o = fedcondi(&["analyze", "--config", &cfg, "--out", out_s], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("analysis/metrics.json")).unwrap()).unwrap();
    assert!(m["checkpoint"].as_str().unwrap().ends_with("round_3.bin"));
    // Same checkpoint and seed as the run, so the same distances.
    assert_eq!(
        fs::read(out.join("analysis/feature_distances.csv")).unwrap(),
        fs::read(out.join("feature_distances.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[ablation]\nno_imputaton = true\n");
    assert_eq!(fedcondi(&["run", "--config", &bad], dir.path()).status.code(), Some(1));
    assert_eq!(fedcondi(&["run", "--config", "missing.toml"], dir.path()).status.code(), Some(1));
    let cfg = write_config(dir.path(), "");
    assert_eq!(fedcondi(&["run", "--config", &cfg, "--ablate", "bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(fedcondi(&["frobnicate"], dir.path()).status.code(), Some(1));
    let range = write_config(dir.path(), "[missingness]\np_s = 1.5\n");
    assert_eq!(fedcondi(&["run", "--config", &range], dir.path()).status.code(), Some(1));
}

#[test]
fn divergence_checkpoints_and_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[training]\nlr_diffusion = 1e300\nlr_task = 1e300\n");
    let out = dir.path().join("out");
    let o = fedcondi(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("ckpt/round_0.bin").exists());
    assert!(!out.join("metrics.json").exists());
}
