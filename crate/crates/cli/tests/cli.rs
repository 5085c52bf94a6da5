use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_citycoord"));
    c.env_remove("CITYCOORD_LOG");
    c
}

fn scenario() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/toy_grid/congested.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

/// The machine-readable error printed on failure.
fn error_code(o: &Output) -> String {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {text}"));
    v["error"]["code"].as_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_reports_and_exit_codes() {
    let ok = run(&["validate", s(&scenario())]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("valid"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let net = scenario().parent().unwrap().join("network.json");
    let body = serde_json::json!({
        "name": "bad",
        "network": net,
        "demand": {"od": [{"origin": "Z0", "destination": "Z7", "mode": "vehicle", "trips": 5}]},
        "tasks": ["signal_timing"],
        "start": 0, "end": 3600, "decision_horizon": 1000
    });
    std::fs::write(&bad, body.to_string()).unwrap();
    let o = run(&["validate", s(&bad), "--json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_code(&o), "invalid_scenario");
    let v = stdout_json(&o);
    assert_eq!(v["valid"], false);
    assert!(v["failures"].as_array().unwrap().len() >= 2);

    let o = run(&["validate", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_code(&o), "io");

    let o = run(&["run", "--scenario", s(&scenario()), "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baseline_scripted_compare() {
    let out = tempfile::tempdir().unwrap();
    let sc = scenario();
    let common = ["--scenario", s(&sc), "--out", s(out.path())];
    let o = run(&[&["run", "--mode", "scripted"][..], &common].concat());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_code(&o), "missing_baseline");

    let o = run(&[&["run", "--json"][..], &common].concat());
    assert!(o.status.success());
    let base = stdout_json(&o);
    assert_eq!(base["mode"], "baseline");
    assert!(base.get("f_ri").is_none());

    let o = run(&[&["run", "--mode", "scripted"][..], &common].concat());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("f_RI") && text.contains("Episode"), "{text}");

    let a = out.path().join("toy_grid_congested_7_baseline");
    let b = out.path().join("toy_grid_congested_7_scripted");
    let o = run(&["compare", s(&a), s(&b), "--json"]);
    assert!(o.status.success());
    let cmp = stdout_json(&o);
    let wait = cmp["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == "Wait")
        .unwrap();
    assert!(wait["improvement_pct"].as_f64().unwrap() > 0.0);

    let o = run(&[
        "run",
        "--seed",
        "8",
        "--scenario",
        s(&scenario()),
        "--out",
        s(out.path()),
    ]);
    assert!(o.status.success());
    let c = out.path().join("toy_grid_congested_8_baseline");
    let o = run(&["compare", s(&a), s(&c)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_code(&o), "mismatch");
}

#[test]
fn demand_export() {
    let out = tempfile::tempdir().unwrap();
    let corridor = scenario().parent().unwrap().join("../corridor/corridor.json");
    let o = run(&["demand", s(&corridor), "--out", s(out.path()), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(v["stats"]["total"].as_u64().unwrap() > 0);
    for f in ["od.json", "trips.csv", "demand_stats.csv"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn external_mode_needs_an_agent_connection() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "--mode",
        "external",
        "--scenario",
        s(&scenario()),
        "--out",
        s(out.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_code(&o), "no_agent");
    let o = run(&[
        "run",
        "--listen",
        "127.0.0.1:0",
        "--scenario",
        s(&scenario()),
        "--out",
        s(out.path()),
    ]);
    assert_eq!(error_code(&o), "usage");
}

/// Spawns a long-running command and returns the first stderr line
/// starting with `listening `, minus that prefix.
fn spawn_listening(cmd: &mut Command) -> (Child, String) {
    let mut child = cmd.stderr(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("process exited before listening").unwrap();
        if let Some(a) = line.strip_prefix("listening ") {
            break a.to_owned();
        }
    };
    // Keep draining stderr so the child never blocks on a full pipe.
    thread::spawn(move || lines.for_each(drop));
    (child, addr)
}

#[test]
fn listener_run_with_scripted_agent() {
    let out = tempfile::tempdir().unwrap();
    let sc = scenario();
    let common = ["--scenario", s(&sc), "--out", s(out.path())];
    assert!(run(&[&["run"][..], &common].concat()).status.success());
    let (child, addr) = spawn_listening(
        bin().args(
            [
                &["run", "--mode", "external", "--listen", "127.0.0.1:0", "--json"][..],
                &common,
            ]
            .concat(),
        ),
    );
    let o = run(&["agent", "--scenario", s(&scenario()), "--connect", &addr, "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["episodes"], 4);
    let done = child.wait_with_output().unwrap();
    assert!(done.status.success());
    let report: Value = serde_json::from_slice(&done.stdout).unwrap();
    assert_eq!(report["mode"], "external");
    assert_eq!(report["episodes"].as_array().unwrap().len(), 4);
    assert!(report["f_ri"]["signal_timing"].as_f64().unwrap() > 0.0);
}

#[test]
fn serve_and_use_as_client() {
    let out = tempfile::tempdir().unwrap();
    let (mut server, url) = spawn_listening(bin().args(["serve", "--addr", "127.0.0.1:0", "--out", s(out.path())]));
    let sv = ["--server", url.as_str()];
    let o = run(&[&["validate", s(&scenario())][..], &sv].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&[&["run", "--mode", "scripted", "--scenario", s(&scenario())][..], &sv].concat());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_code(&o), "missing_baseline");
    let o = run(&[&["run", "--json", "--scenario", s(&scenario())][..], &sv].concat());
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["state"], "done");
    assert!(out.path().join("toy_grid_congested_7_baseline/report.json").is_file());

    let o = run(&[
        &["run", "--mode", "external", "--json", "--scenario", s(&scenario())][..],
        &sv,
    ]
    .concat());
    let started = stdout_json(&o);
    assert_eq!(started["state"], "running");
    let id = started["id"].as_str().unwrap();
    let o = run(&[&["agent", "--scenario", s(&scenario()), "--run", id, "--json"][..], &sv].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["episodes"], 4);

    let o = run(&[&["compare", "toy_grid_congested_7_baseline", id][..], &sv].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Improvement"));
    server.kill().unwrap();
    server.wait().unwrap();
}
