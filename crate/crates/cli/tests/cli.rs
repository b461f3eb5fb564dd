use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nwpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nwpm")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A toy study small enough to run in well under a second.
fn tiny_config(dir: &Path) -> String {
    let out = nwpm(&["preset", "toy-study2"]);
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["name"] = "tiny".into();
    cfg["replicates"] = 2.into();
    cfg["lattice"]["downsample"] = 4.into();
    cfg["samplers"] = serde_json::json!([
        { "label": "indep", "kind": "indep", "smc": { "particles": 20, "temperatures": 10 } },
        { "label": "nwpm", "kind": "nwpm", "iterations": 5, "smc": { "particles": 20, "temperatures": 10 } },
    ]);
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bound_example() {
    let out = nwpm(&["bound", "--models", "2", "--delta", "1", "--sigma", "1"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "0.3333");
}

#[test]
fn presets_list_and_print() {
    let out = nwpm(&["preset"]);
    assert!(stdout(&out).lines().any(|l| l == "pet-sim-desk"));
    let out = nwpm(&["preset", "pet-sim"]);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["replicates"], 30);
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(nwpm(&["preset", "no-such-preset"]).status.code(), Some(2));
    assert_eq!(nwpm(&["bound", "--models", "1", "--delta", "1", "--sigma", "1"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"name\": \"x\"}").unwrap();
    let out = nwpm(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = nwpm(&["run", "--config", "/nonexistent.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_then_run_share_data_and_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let sim = dir.path().join("sim");
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    assert!(nwpm(&["simulate", "--config", &cfg, "--out", sim.to_str().unwrap()]).status.success());
    let a = nwpm(&["--workers", "1", "run", "--config", &cfg, "--traces", "--out", run_a.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = nwpm(&["--workers", "2", "run", "--config", &cfg, "--traces", "--out", run_b.to_str().unwrap()]);
    assert!(b.status.success());
    assert_eq!(fs::read(sim.join("data.csv")).unwrap(), fs::read(run_a.join("data.csv")).unwrap());

    let manifest = |p: &Path| -> serde_json::Value {
        serde_json::from_slice(&fs::read(p.join("manifest.json")).unwrap()).unwrap()
    };
    let (ma, mb) = (manifest(&run_a), manifest(&run_b));
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    for (name, _) in ma["files"].as_object().unwrap() {
        assert_eq!(fs::read(run_a.join(name)).unwrap(), fs::read(run_b.join(name)).unwrap(), "{name}");
    }
    assert!(ma["files"].get("runs/nwpm/J0.4/r1/trace.csv").is_some());
    assert!(ma["volatile"].as_array().unwrap().iter().any(|v| v == "timing.csv"));
}

#[test]
fn select_matches_the_stored_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    assert!(nwpm(&["run", "--config", &cfg, "--traces", "--out", run.to_str().unwrap()]).status.success());
    let base = run.join("runs/nwpm/J0.4/r0");
    let sel = dir.path().join("sel");
    let out = nwpm(&[
        "select",
        "--trace",
        base.join("trace.csv").to_str().unwrap(),
        "--width",
        "5",
        "--height",
        "5",
        "--models",
        "2",
        "--out",
        sel.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(sel.join("selected.txt")).unwrap(),
        fs::read_to_string(base.join("selected.txt")).unwrap()
    );

    let out = nwpm(&[
        "metrics",
        "--selected",
        sel.join("selected.txt").to_str().unwrap(),
        "--truth",
        run.join("truth.txt").to_str().unwrap(),
        "--models",
        "2",
    ]);
    let line = stdout(&out);
    let pc: f64 = line.trim().strip_prefix("percent_correct,").unwrap().parse().unwrap();
    let summary = fs::read_to_string(base.join("summary.csv")).unwrap();
    let last: f64 = summary.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(pc, last);
}

#[test]
fn probe_variance_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = nwpm(&[
        "probe-variance",
        "--config",
        &cfg,
        "--particles",
        "10,40",
        "--temperatures",
        "5,10",
        "--probe-replicates",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 5);
}
