use std::path::Path;
use std::process::{Command, Output};

fn affcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn validate_config_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "profile = \"desk\"\n[optim]\nlocal_iters = 3\n").unwrap();
    let out = affcl(
        &["validate-config", "--config", "c.toml", "--method", "fedprox", "--seed", "9"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config_hash = "));
    assert!(text.contains("method = \"fedprox\""));
    assert!(text.contains("local_iters = 3"));
    assert!(text.contains("seeds = [9]"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[optim]\nlearning_rate = 1.0\n").unwrap();
    for args in [
        &["validate-config", "--config", "bad.toml"][..],
        &["run", "--config", "missing.toml"],
        &["run", "--method", "sgd"],
        &["frobnicate"],
    ] {
        assert_eq!(affcl(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = affcl(&["emit-plots", "--out", "."], dir.path());
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(
        dir.path().join("idx.toml"),
        "[data]\nsource = \"idx\"\nimages = \"nope-images\"\nlabels = \"nope-labels\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_affcl"))
        .args(["run", "--config", "idx.toml", "--out", "runs"])
        .env("AFFCL_DATA_ROOT", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope-images"));
}

#[test]
fn run_then_emit_plots() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.toml"),
        "profile = \"desk\"\n[federation]\nnum_clients = 2\nnum_steps = 2\n[optim]\nlocal_iters = 2\nrounds_per_task = 1\n",
    )
    .unwrap();
    let out = affcl(
        &["run", "--config", "tiny.toml", "--seed", "1", "--out", "runs", "--method", "fedavg"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["method"], "fedavg");
    let out = affcl(&["emit-plots", "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("runs/plots/task_curves.csv").is_file());
}
