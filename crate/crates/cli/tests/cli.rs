use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
batch_size = 4

[data]
train_count = 8
val_count = 4
test_count = 4

[schedule]
epochs = 2
warmup_epochs = 1

[troa]
burn_in_epochs = 0
cadence = 1
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskadapt"))
        .args(args)
        .env_remove("TASKADAPT_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let config = tiny_config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", &config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let res = run(&args);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

/// Dotted paths of every leaf that differs between two JSON documents.
fn diff_paths(a: &Value, b: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<_> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff_paths(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p, out);
            }
        }
        _ if a != b => {
            out.insert(prefix.to_string());
        }
        _ => {}
    }
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let res = run(&["train", "--config", "/nonexistent/exp.toml", "--out", "/tmp/unused"]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("/nonexistent/exp.toml"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "batch_sise = 4\n").unwrap();
    let res = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("batch_sise"));
}

#[test]
fn invalid_schedule_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[schedule]\nepochs = 3\nwarmup_epochs = 3\n").unwrap();
    let res = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

#[test]
fn one_epoch_smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "run", &["--epochs", "1"]);
    for f in ["checkpoint.bin", "config.toml", "config.json", "loss_curve.csv", "val_metrics.csv", "predictions_epoch01.png", "test_metrics.json", "affinity.csv", "affinity.png", "run.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 1);
    assert!(summary["config_file_hash"].is_string());
    // The resolved config reloads as a config file.
    let again = run(&["train", "--config", out.join("config.toml").to_str().unwrap(), "--out", dir.path().join("again").to_str().unwrap()]);
    assert_eq!(code(&again), 0);
}

#[test]
fn ablation_only_changes_component_flags() {
    let dir = tempfile::tempdir().unwrap();
    let full = train_tiny(dir.path(), "full", &["--epochs", "1"]);
    let vanilla = train_tiny(dir.path(), "vanilla", &["--epochs", "1", "--ablate", "vanilla"]);
    let read = |p: &Path| -> Value { serde_json::from_str(&fs::read_to_string(p.join("config.json")).unwrap()).unwrap() };
    let mut diff = BTreeSet::new();
    diff_paths(&read(&full), &read(&vanilla), "", &mut diff);
    let want: BTreeSet<String> =
        ["model.adapter.use_taa", "model.adapter.use_bottleneck", "model.adapter.use_tsn"].map(String::from).into();
    assert_eq!(diff, want);
}

#[test]
fn troa_sign_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "pos", &["--epochs", "1", "--troa-sign", "positive"]);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["troa"]["sign"], "positive");
    assert_eq!(code(&run(&["train", "--troa-sign", "sideways"])), 2);
}

#[test]
fn eval_reports_all_metrics_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "run", &[]);
    let ck = out.join("checkpoint.bin");
    let ev = dir.path().join("ev");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "test", "--domain", "A", "--out", ev.to_str().unwrap()];
    assert_eq!(code(&run(&args)), 0);
    let first = fs::read(ev.join("eval_test_A.json")).unwrap();
    let report: Value = serde_json::from_slice(&first).unwrap();
    for key in ["miou_pct", "depth_rmse", "normal_merr_deg", "edge_f1_pct"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(fs::read(ev.join("eval_test_A.json")).unwrap(), first);

    let b = ["eval", "--checkpoint", ck.to_str().unwrap(), "--domain", "B", "--out", ev.to_str().unwrap()];
    assert_eq!(code(&run(&b)), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval_test_B.json")).unwrap()).unwrap();
    assert_eq!(report["domain"], "B");
}

#[test]
fn eval_of_missing_checkpoint_exits_2() {
    let res = run(&["eval", "--checkpoint", "/nonexistent/ck.bin", "--out", "/tmp/unused"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn untrained_affinity_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aff");
    assert_eq!(code(&run(&["affinity", "--out", out.to_str().unwrap()])), 0);
    let csv = fs::read_to_string(out.join("affinity.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let n = rows.len();
    assert_eq!(n, 4);
    for r in &rows {
        assert!(r.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-9));
    }
    assert_eq!(png_size(&out.join("affinity.png")), (n as u32, n as u32));
}

#[test]
fn trained_affinity_columns_are_on_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), "run", &[]);
    let out = dir.path().join("aff");
    let ck = run_dir.join("checkpoint.bin");
    assert_eq!(code(&run(&["affinity", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let csv = fs::read_to_string(out.join("affinity.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    for t in 0..rows.len() {
        let col: f64 = rows.iter().map(|r| r[t]).sum();
        assert!((col - 1.0).abs() < 1e-6, "column {t} sums to {col}");
    }
    assert!(rows.iter().flatten().any(|&v| (v - 0.25).abs() > 1e-6), "affinity never updated");
}

#[test]
fn attention_maps_are_dumped_per_task_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), "run", &["--epochs", "1"]);
    let out = dir.path().join("att");
    let ck = run_dir.join("checkpoint.bin");
    assert_eq!(code(&run(&["attention", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.iter().any(|n| n == "taa_block0_segmentation_head0.png"), "{names:?}");
    let (w, h) = png_size(&out.join("taa_block0_edge_head0.png"));
    assert_eq!(w, h);
    let bad = run(&["attention", "--checkpoint", ck.to_str().unwrap(), "--block", "99", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    for module in ["taa", "tsn", "adapter", "losses"] {
        let res = run(&["gradcheck", "--module", module]);
        assert_eq!(code(&res), 0, "{module}");
        let report: Value = serde_json::from_slice(&res.stdout).unwrap();
        assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    }
    assert_eq!(code(&run(&["gradcheck", "--module", "taa", "--corrupt"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--module", "backbone"])), 2);
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&run(&["generate-data", "--out", out.to_str().unwrap(), "--count", "10", "--seed", "5"])), 0);
    }
    let dirs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 10);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 10);
    for entry in fs::read_dir(&a).unwrap() {
        let p = entry.unwrap().path();
        let rel = p.strip_prefix(&a).unwrap();
        if p.is_dir() {
            for f in fs::read_dir(&p).unwrap() {
                let f = f.unwrap().path();
                assert_eq!(fs::read(&f).unwrap(), fs::read(b.join(rel).join(f.file_name().unwrap())).unwrap());
            }
        } else {
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.join(rel)).unwrap());
        }
    }
}

#[test]
fn output_root_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_taskadapt"))
        .args(["affinity"])
        .env("TASKADAPT_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&res), 0);
    assert!(dir.path().join("affinity.csv").is_file());
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("boom.toml");
    fs::write(&path, format!("{TINY}\n[optimizer]\nlr = 1e30\n")).unwrap();
    let res = run(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("batch seeds"));
}

#[test]
fn logs_are_json_lines() {
    let res = Command::new(env!("CARGO_BIN_EXE_taskadapt"))
        .args(["gradcheck", "--module", "losses"])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(!stderr.trim().is_empty());
    for line in stderr.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string());
    }
}
