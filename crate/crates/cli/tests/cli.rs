use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sdasim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdasim")).args(args).current_dir(cwd).env_remove("SDASIM_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn default_config_round_trips_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sdasim(&["default-config"], tmp.path());
    assert_eq!(code(&o), 0);
    let cfg = tmp.path().join("scenario.toml");
    fs::write(&cfg, &o.stdout).unwrap();
    let out = tmp.path().join("run");
    let o = sdasim(&["run", "--config", cfg.to_str().unwrap(), "--mode", "stale", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("outcome="));
    for f in ["trace.csv", "result.json", "metadata.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_sdasim"))
        .args(["synth-rollout", "--policy", "always", "--episode", "3"])
        .current_dir(tmp.path())
        .env("SDASIM_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("rollout.csv").is_file());
    assert!(out.join("rollout.json").is_file());
}

#[test]
fn campaign_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = sdasim(&["campaign", "--runs", "2", "--mode", "absent", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("outcomes.csv")).unwrap();
    assert!(table.contains("baseline") && table.contains("absent"), "{table}");
    assert!(!table.contains("stale"));
}

#[test]
fn config_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "duration = -5.0\n").unwrap();
    assert_eq!(code(&sdasim(&["run", "--config", bad.to_str().unwrap()], tmp.path())), 3);
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&sdasim(&["run", "--config", bad.to_str().unwrap()], tmp.path())), 3);
    assert_eq!(code(&sdasim(&["run", "--mode", "sideways"], tmp.path())), 3);
    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(&sdasim(&["run", "--config", missing.to_str().unwrap()], tmp.path())), 3);
    let policy = tmp.path().join("policy.json");
    fs::write(&policy, "{\"format\": \"something-else\"}").unwrap();
    assert_eq!(code(&sdasim(&["synth-rollout", "--policy", policy.to_str().unwrap()], tmp.path())), 3);
}

#[test]
fn io_errors_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&sdasim(&["synth-rollout", "--policy", missing.to_str().unwrap()], tmp.path())), 5);
    let file = tmp.path().join("file");
    fs::write(&file, "x").unwrap();
    let under_file = file.join("out");
    assert_eq!(code(&sdasim(&["run", "--out", under_file.to_str().unwrap()], tmp.path())), 5);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&sdasim(&[], tmp.path())), 2);
    assert_eq!(code(&sdasim(&["run", "--seed", "abc"], tmp.path())), 2);
}
