mod common;

use std::fs;
use std::path::Path;

use citycoord_core::harness::*;
use citycoord_core::tasks::{MetricKind, TaskId};

use common::*;

fn opts(out: &Path) -> RunOptions<'static> {
    RunOptions {
        out_root: out.to_path_buf(),
        ..RunOptions::default()
    }
}

#[test]
fn baseline_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_run(congested(), RunMode::Baseline, opts(a.path())).unwrap();
    let rb = cmd_run(congested(), RunMode::Baseline, opts(b.path())).unwrap();
    for file in ["report.json", "report.txt", "events.ndjson", "scenario.json"] {
        let x = fs::read(ra.dir.join(file)).unwrap();
        let y = fs::read(rb.dir.join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
    assert_eq!(ra.dir.file_name().unwrap(), "toy_grid_congested_7_baseline");
    let report = &ra.report;
    assert!(report.f_ri.is_none() && report.reward.is_none());
    assert_eq!(report.windows.len(), 4);
    let c = report.conservation;
    assert_eq!(c.entered, c.in_network + c.exited);
    assert_eq!(RunReport::load(&ra.dir).unwrap(), *report);
}

#[test]
fn agent_runs_need_a_stored_baseline() {
    let out = tempfile::tempdir().unwrap();
    let e = cmd_run(congested(), RunMode::Scripted, opts(out.path())).unwrap_err();
    assert_eq!(e.code(), "missing_baseline");
    assert!(e.to_string().contains("--mode baseline"));
    let e = cmd_run(congested(), RunMode::External, opts(out.path())).unwrap_err();
    assert!(matches!(
        e,
        HarnessError::NoAgent | HarnessError::MissingBaseline { .. }
    ));
}

#[test]
fn scripted_run_reports_improvement_against_baseline() {
    let out = tempfile::tempdir().unwrap();
    let base = cmd_run(congested(), RunMode::Baseline, opts(out.path())).unwrap();
    let run = cmd_run(congested(), RunMode::Scripted, opts(out.path())).unwrap();
    let r = &run.report;
    let f_ri = r.f_ri.as_ref().expect("f_ri against the baseline");
    assert!(f_ri.contains_key(&TaskId::SignalTiming));
    assert!(r.reward.is_some());
    assert_eq!(r.episodes.len(), 4);
    for (k, e) in r.episodes.iter().enumerate() {
        assert!(run.dir.join(format!("transcripts/episode_{k:03}.ndjson")).is_file());
        // Later windows start from the committed history, not the baseline's, so only
        // the first window's rollout reference coincides with the stored baseline.
        if let (0, Some(c)) = (k, e.committed) {
            assert!((e.rollout_rewards[c] - e.reward.total).abs() < 1e-9);
        }
    }
    assert!(run.dir.join("memory.json").is_file());
    assert!(run.dir.join("timing.json").is_file());
    let wait = |rep: &RunReport| rep.metrics[&TaskId::SignalTiming].get(MetricKind::AvgWaiting);
    assert!(wait(r) < wait(&base.report));

    let cmp = cmd_compare(&base.dir, &run.dir).unwrap();
    let row = cmp
        .rows
        .iter()
        .find(|row| row.task == Some(TaskId::SignalTiming) && row.metric == "Wait")
        .unwrap();
    assert!(row.change_pct.unwrap() < 0.0 && row.improvement_pct.unwrap() > 0.0);
    assert!(cmp.render().contains("Improvement"));
    assert!(r.render().contains("f_RI"));
}

#[test]
fn comparing_a_report_with_itself_is_all_zero() {
    let out = tempfile::tempdir().unwrap();
    let base = cmd_run(congested(), RunMode::Baseline, opts(out.path())).unwrap();
    let cmp = cmd_compare(&base.dir, &base.dir).unwrap();
    assert!(!cmp.rows.is_empty());
    for row in &cmp.rows {
        assert_eq!(row.change_pct, Some(0.0), "{}", row.metric);
    }
}

#[test]
fn percent_change_directions() {
    let (c, i) = percent_change(100.0, 90.0, false);
    assert!((c.unwrap() + 10.0).abs() < 1e-12);
    assert!((i.unwrap() - 10.0).abs() < 1e-12);
    let (c, i) = percent_change(100.0, 90.0, true);
    assert!((c.unwrap() + 10.0).abs() < 1e-12 && (i.unwrap() + 10.0).abs() < 1e-12);
    assert_eq!(percent_change(0.0, 0.0, true), (Some(0.0), Some(0.0)));
    assert_eq!(percent_change(0.0, 5.0, true), (None, None));
}

#[test]
fn reports_from_different_seeds_do_not_compare() {
    let out = tempfile::tempdir().unwrap();
    let a = cmd_run(congested(), RunMode::Baseline, opts(out.path())).unwrap();
    let b = cmd_run(
        congested(),
        RunMode::Baseline,
        RunOptions {
            seed: Some(8),
            ..opts(out.path())
        },
    )
    .unwrap();
    assert_ne!(a.dir, b.dir);
    let e = cmd_compare(&a.dir, &b.dir).unwrap_err();
    assert_eq!(e.code(), "mismatch");
}

fn write_scenario(dir: &Path, body: serde_json::Value) -> std::path::PathBuf {
    let p = dir.join("s.json");
    fs::write(&p, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    p
}

#[test]
fn invalid_scenarios_list_every_failure() {
    let dir = tempfile::tempdir().unwrap();
    let net = scenarios().join("toy_grid/network.json");
    let p = write_scenario(
        dir.path(),
        serde_json::json!({
            "name": "broken",
            "network": net,
            "demand": {"od": [{"origin": "Z0", "destination": "Z9", "mode": "vehicle", "trips": 10}], "profile": "uniform"},
            "tasks": ["signal_timing", "ramp_metering"],
            "start": 0, "end": 1000,
            "dt": 1.0,
            "decision_horizon": 1800,
            "alpha": 0.0
        }),
    );
    let v = cmd_validate(&p).unwrap();
    assert!(!v.valid);
    let all = v.failures.join("\n");
    assert!(v.failures.len() >= 4, "{all}");
    assert!(all.contains("Z9"), "{all}");
    assert!(all.contains("ramp_metering"), "{all}");
    assert!(all.contains("alpha"), "{all}");
    let e = cmd_run(&p, RunMode::Baseline, opts(dir.path())).unwrap_err();
    assert_eq!(e.code(), "invalid_scenario");

    let p = write_scenario(dir.path(), serde_json::json!({"name": "x", "network": net, "typo": 1}));
    assert_eq!(cmd_validate(&p).unwrap_err().code(), "parse");
    assert!(cmd_validate(scenarios().join("toy_grid/congested.json")).unwrap().valid);
    assert!(cmd_validate(corridor()).unwrap().valid);
}

#[test]
fn demand_export_matches_a_recount() {
    let out = tempfile::tempdir().unwrap();
    let export = cmd_demand(corridor(), out.path(), None).unwrap();
    let od: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("od.json")).unwrap()).unwrap();
    assert_eq!(od["zones"].as_array().unwrap().len(), 3);
    let trips = read_trips(&out.path().join("trips.csv")).unwrap();
    assert_eq!(export.stats.total, trips.len() as u64);
    let stats_csv = fs::read_to_string(out.path().join("demand_stats.csv")).unwrap();
    let header = stats_csv.lines().next().unwrap();
    for col in ["Taxi", "Public Transit", "Walk", "Total"] {
        assert!(header.split(',').any(|h| h == col), "{header}");
    }
    let count = |m: &str| trips.iter().filter(|t| t.mode.to_string() == m).count() as u64;
    assert_eq!(export.stats.taxi, count("taxi"));
    assert_eq!(export.stats.walk, count("walk"));
    assert_eq!(export.stats.public_transit, count("bus") + count("subway"));
    // The scenario's period keeps only departures inside it.
    let file = ScenarioFile::load(corridor()).unwrap();
    assert!(trips
        .iter()
        .all(|t| t.departure_time >= file.scenario.start && t.departure_time < file.scenario.end));

    let toy = tempfile::tempdir().unwrap();
    let e = cmd_demand(scenarios().join("toy_grid/day.json"), toy.path(), Some(3)).unwrap();
    let trips = read_trips(&toy.path().join("trips.csv")).unwrap();
    assert_eq!(e.stats.total, trips.len() as u64);
    assert_eq!(e.stats.vehicle, trips.len() as u64);
}

#[test]
fn scenario_digest_ignores_the_seed() {
    let a = ScenarioFile::load(congested()).unwrap();
    let mut b = a.clone();
    b.scenario.seed = 99;
    assert_eq!(a.digest(), b.digest());
    b.scenario.alpha = 0.7;
    assert_ne!(a.digest(), b.digest());
    assert_eq!(a.windows(), vec![25_200.0, 27_000.0, 28_800.0, 30_600.0]);
}

#[test]
fn clock_labels() {
    assert_eq!(clock(0.0), "00:00");
    assert_eq!(clock(27_000.0), "07:30");
    assert_eq!(clock(86_400.0), "24:00");
}
