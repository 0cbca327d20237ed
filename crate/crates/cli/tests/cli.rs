use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aepsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aepsim")).args(args).output().unwrap()
}

fn root() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn shipped_rules_check_clean() {
    let o = aepsim(&["check-rules", p(&root().join("crates/core/rules"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("7 rules"));
}

#[test]
fn alias_typo_fails_with_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("moved.epl"),
        "CONDITION: gps1=GPS -> gps2=GPS\n    where Geo.distance(gps1, gpss) > 1 meter\nACTION: create HasMoved(lat = gps2.lat, lon = gps2.lon, distance = 1)\n",
    )
    .unwrap();
    let o = aepsim(&["check-rules", p(dir.path())]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("moved.epl:2:"), "{err}");
    assert!(err.contains("unbound alias"), "{err}");
}

#[test]
fn emission_cycle_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("loop.epl"),
        "SELECT m.value as v FROM pattern[every m=Speed] ACTION: new Speed(value = v)\n",
    )
    .unwrap();
    let o = aepsim(&["check-rules", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cyclic emission"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&aepsim(&["frobnicate"])), 2);
    assert_eq!(code(&aepsim(&["run", "--scenario"])), 2);
    assert_eq!(code(&aepsim(&[])), 2);
}

#[test]
fn gen_trace_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = root().join("scenarios/commute.trace.json");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(code(&aepsim(&["gen-trace", "--spec", p(&spec), "--out", p(&a)])), 0);
    assert_eq!(code(&aepsim(&["gen-trace", "--spec", p(&spec), "--out", p(&b)])), 0);
    let x = std::fs::read(&a).unwrap();
    assert_eq!(x, std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(x).unwrap().lines().count(), 1502);
}

#[test]
fn zero_noise_single_point_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.json");
    std::fs::write(
        &spec,
        r#"{"start": {"lat": 52.0, "lon": 9.0}, "noise_sigma_m": 0.0, "duration_s": 10}"#,
    )
    .unwrap();
    let out = dir.path().join("t.csv");
    assert_eq!(code(&aepsim(&["gen-trace", "--spec", p(&spec), "--out", p(&out)])), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).map(|l| l.split_once(',').unwrap().1).collect();
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| *r == rows[0]));
}

#[test]
fn replay_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    aepsim(&[
        "gen-trace",
        "--spec",
        p(&root().join("scenarios/commute.trace.json")),
        "--out",
        p(&trace),
    ]);
    let inject = dir.path().join("inject.json");
    std::fs::write(
        &inject,
        r#"{"events": [
            {"type": "ParcelAccepted", "t": 30000, "attrs": {"id": "p1", "destLat": 52.40, "destLon": 9.7320, "reward": 4.0}},
            {"type": "ParcelDelivered", "t": 900000, "attrs": {"id": "p1"}}
        ]}"#,
    )
    .unwrap();
    let o = aepsim(&[
        "replay",
        "--trace",
        p(&trace),
        "--rules",
        p(&root().join("crates/core/rules")),
        "--inject",
        p(&inject),
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["sensed"]["Gps"], 1501);
    assert!(report["context"]["HasMoved"].as_u64().unwrap() > 0);
    assert!(report["context"]["DistanceToDestination"].as_u64().unwrap() > 0);
}

#[test]
fn replay_of_missing_trace_is_a_domain_error() {
    let o = aepsim(&[
        "replay",
        "--trace",
        "/nonexistent.csv",
        "--rules",
        p(&root().join("crates/core/rules")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn run_writes_logs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = aepsim(&[
        "run",
        "--scenario",
        p(&root().join("scenarios/handover.json")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["handovers"], 1);
    assert_eq!(report["auctions"]["resolved"], 1);
    let agents = std::fs::read_to_string(dir.path().join("agents.jsonl")).unwrap();
    assert!(agents
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn empty_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.json");
    std::fs::write(
        &s,
        r#"{"duration_ms": 0, "agents": [{"id": "x", "trace": {"synthetic": {"start": {"lat": 52.0, "lon": 9.0}}}}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = aepsim(&["run", "--scenario", p(&s), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ticks"], 0);
    assert_eq!(std::fs::read_to_string(out.join("agents.jsonl")).unwrap(), "");
}

#[test]
fn invalid_scenario_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.json");
    std::fs::write(
        &s,
        r#"{"duration_ms": 1000, "agents": [
            {"id": "x", "trace": {"synthetic": {"start": {"lat": 52.0, "lon": 9.0}}}},
            {"id": "x", "trace": {"synthetic": {"start": {"lat": 52.0, "lon": 9.0}}}}
        ]}"#,
    )
    .unwrap();
    let o = aepsim(&["run", "--scenario", p(&s), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("duplicate agent id"), "{}", stderr(&o));
}
