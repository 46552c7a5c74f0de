//! The `protoclean` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
cleaner_mode = "cpc_agn"
seeds = [0]

[dataset]
name = "tiny"
num_classes = 3
dim = 4
n_per_class = 30
n_test_per_class = 20
separation_min = 2.0
separation_max = 4.0

[noise]
kind = "symmetric"
rate = 0.4

[model]
hidden = [16, 16]
proj_dim = 4

[trainer]
epochs = 6
warmup_epochs = 2
cpc_warmup = 0.2
batch_size = 16
"#;

fn protoclean(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoclean"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PROTOCLEAN_OUT")
        .output()
        .expect("binary runs")
}

fn tiny_spec(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_object(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error in stderr: {text}"));
    serde_json::from_str(line).expect("stderr error is JSON")
}

#[test]
fn out_of_range_tau_is_a_usage_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let out = protoclean(&["run", &spec, "--set", "trainer.tau=1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = error_object(&out);
    assert_eq!(err["exit_code"], 2);
    assert!(err["error"]["field"].as_str().unwrap().contains("tau"));
    assert!(!dir.path().join("runs").exists(), "nothing is written for a rejected spec");
}

#[test]
fn unknown_keys_and_missing_files_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let out = protoclean(&["run", &spec, "--set", "trainer.taux=0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_object(&out)["error"]["field"], "trainer.taux");

    let out = protoclean(&["run", "does-not-exist.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    error_object(&out);

    let out = protoclean(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    error_object(&out);
}

#[test]
fn run_writes_one_record_per_epoch_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = protoclean(&["run", &spec, "--out", out_dir.to_str().unwrap()], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let metrics_a = fs::read(a.join("metrics_seed0.jsonl")).unwrap();
    let metrics_b = fs::read(b.join("metrics_seed0.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_b);

    let lines: Vec<serde_json::Value> = String::from_utf8(metrics_a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for (e, rec) in lines.iter().enumerate() {
        assert_eq!(rec["epoch"], e);
        assert_eq!(rec["nets"].as_array().unwrap().len(), 2);
    }
    assert!(a.join("summary.json").exists());
    assert!(a.join("spec.toml").exists());
    assert!(a.join("checkpoints/seed0_net0.json").exists());
    assert!(a.join("checkpoints/seed0_bank1.json").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_protoclean"))
        .args(["run", &spec, "--set", "trainer.epochs=4"])
        .current_dir(dir.path())
        .env("PROTOCLEAN_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("tiny/summary.json").exists());
}

#[test]
fn sweep_runs_every_cell_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let out_dir = dir.path().join("sweep");
    let args = [
        "sweep",
        &spec,
        "--set",
        "trainer.epochs=4",
        "--grid",
        "trainer.tau=0.5,0.6",
        "--grid",
        "cleaner_mode=gmm_agn,cpc_agn",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = protoclean(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        assert!(c.path().join("summary.json").exists());
    }

    let marker = cells[0].path().join("metrics_seed0.jsonl");
    let before = fs::metadata(&marker).unwrap().modified().unwrap();
    let again = protoclean(&args, dir.path());
    assert!(again.status.success());
    assert_eq!(fs::metadata(&marker).unwrap().modified().unwrap(), before);

    let report = protoclean(&["report", out_dir.to_str().unwrap()], dir.path());
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    let csv = String::from_utf8(report.stdout).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next().unwrap(), "config,benchmark,cleaner,seeds,accuracy_mean,accuracy_std");
    assert_eq!(rows.count(), 4);
}

#[test]
fn report_tables_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let run_dir = dir.path().join("r");
    let out = protoclean(&["run", &spec, "--out", run_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let tables = dir.path().join("tables");
    let out = protoclean(
        &["report", run_dir.to_str().unwrap(), "--out", tables.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["accuracy.csv", "auc.csv", "ablation.csv", "ks.csv"] {
        let text = fs::read_to_string(tables.join(name)).unwrap();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let width = reader.headers().unwrap().len();
        for row in reader.records() {
            assert_eq!(row.unwrap().len(), width, "{name}");
        }
    }
    let auc = fs::read_to_string(tables.join("auc.csv")).unwrap();
    assert!(auc.starts_with("config,cleaner_mode,seed,epoch,network,scorer,auc"));
}

#[test]
fn report_without_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = protoclean(&["report"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    error_object(&out);
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = protoclean(&["report", empty.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    error_object(&out);
}

#[test]
fn corrupt_metric_lines_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let run_dir = dir.path().join("r");
    assert!(protoclean(&["run", &spec, "--out", run_dir.to_str().unwrap()], dir.path())
        .status
        .success());
    let path = run_dir.join("metrics_seed0.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    fs::write(&path, text).unwrap();
    let out = protoclean(&["report", run_dir.to_str().unwrap(), "--table", "auc"], dir.path());
    assert!(out.status.success());

    fs::write(&path, "garbage\n").unwrap();
    let out = protoclean(&["report", run_dir.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    error_object(&out);
}
