use std::path::Path;
use std::process::Command;

fn tcbsde() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tcbsde"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn small_run_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "noise.toml",
        "seed = 3\n[grid]\nsteps = 10\n[batch]\nscenarios = 2000\n",
    );
    let out = tcbsde()
        .args(["simulate-noise", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.lines().last().unwrap().starts_with("PASS"));
    assert!(dir.path().join("simulate-noise_3.csv").exists());
    assert!(dir.path().join("simulate-noise_3.jsonl").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 1\n[grid]\nsteps = 0.5\nhorizon = -1\n");
    let out = tcbsde().args(["isometry", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("line 4"), "{err}");
}

#[test]
fn missing_seed_and_bad_usage_exit_with_two() {
    let out = tcbsde().arg("isometry").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert_eq!(tcbsde().arg("no-such-command").output().unwrap().status.code(), Some(2));
    assert_eq!(
        tcbsde().args(["isometry", "--seed", "1", "--threads", "0"]).output().unwrap().status.code(),
        Some(2)
    );
}

#[test]
fn failed_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A zero band around the isometry gap cannot hold.
    let cfg = write(
        dir.path(),
        "strict.toml",
        "seed = 1\n[grid]\nsteps = 5\n[batch]\nscenarios = 500\n[checks]\nse_multiplier = 0.0\n",
    );
    let out = tcbsde()
        .args(["isometry", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).lines().last().unwrap().starts_with("FAIL"));
}
