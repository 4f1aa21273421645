//! Black-box checks of the `feddp` binary: exit codes, emitted artifacts and
//! byte-stable replays.

use std::path::Path;
use std::process::{Command, Output};

fn feddp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feddp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary spawns")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL_CONFIG: &str = r#"{
  "dataset": {
    "source": "synthetic",
    "n_samples": 200,
    "n_features": 3,
    "n_classes": 2,
    "class_separation": 2.0,
    "test_fraction": 0.2
  },
  "n_clients": 2,
  "classes_per_client": 2,
  "mechanism": { "kind": "laplace", "xi1": 2.0, "q": 1.0, "c1": 10.0, "c2": 1.0, "xi2": 1.0 },
  "budget": { "epsilon": 1.0 },
  "b": 2,
  "t": 10,
  "mu": 1.0,
  "lambda": 2.0,
  "repeat": 2,
  "seed": 11
}"#;

#[test]
fn train_writes_artifacts_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);

    let first = feddp(&["train", "--config", &config, "--out", "first"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("mean final loss"), "stdout: {stdout}");
    assert!(dir.path().join("first/trace.csv").is_file());
    assert!(dir.path().join("first/summary.json").is_file());

    let second = feddp(&["train", "--config", &config, "--out", "second"], dir.path());
    assert!(second.status.success());
    let a = std::fs::read(dir.path().join("first/trace.csv")).unwrap();
    let b = std::fs::read(dir.path().join("second/trace.csv")).unwrap();
    assert_eq!(a, b, "replay changed trace.csv");

    let header = a.split(|&c| c == b'\n').next().unwrap();
    assert_eq!(header, b"trial,t,loss,acc,eta,dist");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    // repeat = 0 and b > N are both config errors.
    let broken = SMALL_CONFIG.replace("\"repeat\": 2", "\"repeat\": 0");
    let config = write_config(dir.path(), "broken.json", &broken);
    let output = feddp(&["train", "--config", &config], dir.path());
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn missing_config_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = feddp(&["train", "--config", "no-such-file.json"], dir.path());
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn plan_prints_candidates_and_selection() {
    let dir = tempfile::tempdir().unwrap();
    // Auto schedule with estimated constants exercises the full plan path.
    let auto = SMALL_CONFIG
        .replace("\"b\": 2", "\"b\": \"auto\"")
        .replace("\"t\": 10", "\"t\": \"auto\"")
        .replace(
            "\"repeat\": 2",
            "\"constants\": { \"source\": \"estimate\", \"local_steps\": 1500, \"local_learning_rate\": 0.3, \"convergence_tol\": 0.1 },\n  \"repeat\": 2",
        );
    let config = write_config(dir.path(), "auto.json", &auto);
    let output = feddp(
        &["plan", "--config", &config, "--out", "plan.json"],
        dir.path(),
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("selected:"), "stdout: {stdout}");
    let plan_json = std::fs::read_to_string(dir.path().join("plan.json")).unwrap();
    assert!(plan_json.contains("\"candidates\""));
}

#[test]
fn sweep_prints_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "config.json", SMALL_CONFIG);
    let output = feddp(
        &[
            "sweep",
            "--config",
            &config,
            "--axis",
            "t",
            "--values",
            "5,10",
            "--out",
            "sweep",
        ],
        dir.path(),
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().count(), 3, "header plus two rows: {stdout}");
    assert!(dir.path().join("sweep/sweep.json").is_file());
}
