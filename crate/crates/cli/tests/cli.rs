use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lindt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lindt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LINDT_WORKERS")
        .output()
        .expect("spawn lindt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Copies a bundled scenario with a shorter horizon and a new name.
fn short_scenario(dir: &Path, base: &str, name: &str, rounds: u32) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{base}.toml"));
    let text = fs::read_to_string(src)
        .unwrap()
        .replace("rounds = 200", &format!("rounds = {rounds}"))
        .replace(&format!("name = \"{base}\""), &format!("name = \"{name}\""));
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_log_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path(), "nfl", "small", 6);
    let out = lindt(&["run", cfg.to_str().unwrap(), "--out", "runs"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("final beta"));
    let table = fs::read_to_string(dir.path().join("runs/small.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(dir.path().join("runs/small.json").is_file());
}

#[test]
fn replay_compare_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = short_scenario(dir.path(), "iid", "a", 5);
    let b = short_scenario(dir.path(), "nfl", "b", 5);
    for (cfg, workers) in [(&a, "1"), (&b, "3")] {
        let out = lindt(&["--workers", workers, "run", cfg.to_str().unwrap(), "--out", "."], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    let replay = lindt(&["replay", "b.json", "--workers", "2"], dir.path());
    assert!(replay.status.success(), "{}", String::from_utf8_lossy(&replay.stderr));
    assert!(stdout(&replay).contains("identical"));

    // both scenarios share the same task, so they compare
    let cmp = lindt(&["compare", "a.json", "b.json", "--metric", "w-div"], dir.path());
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    let text = stdout(&cmp);
    assert_eq!(text.lines().next().unwrap(), "round,a,b,spread");
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().last().unwrap().starts_with("final_window_mean,"));

    let original = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let exported = dir.path().join("again");
    let out = lindt(&["export", "a.json", "--format", "table", "--out", exported.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(exported.join("a.csv")).unwrap(), original);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[federation]\nclients = 2\nper_round = 5\n").unwrap();
    let out = lindt(&["run", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let missing = lindt(&["replay", "nope.json"], dir.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}
