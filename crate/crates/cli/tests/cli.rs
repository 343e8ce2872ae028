use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 1

[axes]
architecture = ["maf", "realnvp"]
target = ["normal"]
dims = [2]
hidden = [[4]]
n_samples = [200]

[train]
batch_size = 50
stages = 1
epochs_per_stage = 2

[metrics]
n_batches = 2
batch_size = 100
"#;

fn nfbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfbench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("sweep.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn plan_lists_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let plan_json = dir.path().join("plan.json");
    let out = nfbench(&["plan", "--config", &config, "--out", plan_json.to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("0000-maf-normal-d2-b2-h4x1-n200-r0"));
    assert!(stdout.contains("2 runs"));
    let specs: serde_json::Value = serde_json::from_slice(&std::fs::read(plan_json).unwrap()).unwrap();
    assert_eq!(specs.as_array().unwrap().len(), 2);
}

#[test]
fn run_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let runs = dir.path().join("runs");
    let runs = runs.to_str().unwrap();

    let out = nfbench(&["run", "--config", &config, "--out", runs, "--parallel", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(dir.path().join("runs/records/0000-maf-normal-d2-b2-h4x1-n200-r0.json")).unwrap();

    let out = nfbench(&["run", "--config", &config, "--out", runs, "--resume"]);
    assert!(out.status.success());
    let again = std::fs::read(dir.path().join("runs/records/0000-maf-normal-d2-b2-h4x1-n200-r0.json")).unwrap();
    assert_eq!(first, again, "resume must keep finished records untouched");

    let report_dir = dir.path().join("report");
    let out = nfbench(&["report", "--records", runs, "--out", report_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["ks.csv", "wasserstein.csv", "fnorm.csv", "summary.txt"] {
        assert!(report_dir.join(name).exists(), "{name}");
    }
    let ks = std::fs::read_to_string(report_dir.join("ks.csv")).unwrap();
    assert_eq!(ks.lines().count(), 3);
}

#[test]
fn bad_config_reports_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[axes]\ndims = [0]\n").unwrap();
    let out = nfbench(&["plan", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("axes.dims[0]"));
}

#[test]
fn report_without_records_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("records")).unwrap();
    let out = nfbench(&["report", "--records", dir.path().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
