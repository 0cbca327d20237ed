use std::collections::BTreeMap;
use std::path::PathBuf;

use aep_core::sim::{run, RunOutput, Scenario, SimError};
use serde_json::Value;

fn path(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios")).join(name)
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(&path(name)).unwrap()
}

fn of_kind<'a>(out: &'a RunOutput, kind: &str) -> Vec<&'a Value> {
    out.agent_log.iter().filter(|r| r["kind"] == kind).collect()
}

#[test]
fn nearby_mover_wins_and_idle_neighbor_abstains() {
    let out = run(&scenario("handover.json")).unwrap();
    let r = &out.report;
    assert_eq!(r.auctions.opened, 1);
    assert_eq!(r.auctions.resolved, 1);
    assert_eq!(r.handovers, 1);

    let resolved: Vec<_> = of_kind(&out, "auction")
        .into_iter()
        .filter(|e| e.get("resolved").is_some())
        .collect();
    assert_eq!(resolved[0]["winner"], "a1");

    let bidders: Vec<_> = of_kind(&out, "bid").iter().map(|e| e["agent"].clone()).collect();
    assert!(!bidders.contains(&Value::from("a2")), "{bidders:?}");
    assert!(!bidders.contains(&Value::from("a3")));
    // a2 heard the auction but never derived an arrival estimate.
    assert!(out
        .agent_log
        .iter()
        .any(|e| e["kind"] == "msg_in" && e["agent"] == "a2"));
    assert!(!out
        .pipeline_log
        .iter()
        .any(|e| e["agent"] == "a2" && e["payload"]["type"] == "EstimatedArrival"));
    // a3 is out of broadcast range.
    assert!(!out
        .agent_log
        .iter()
        .any(|e| e["kind"] == "msg_in" && e["agent"] == "a3"));

    let handover = &of_kind(&out, "handover")[0];
    assert_eq!(handover["from"], "a0");
    assert_eq!(handover["to"], "a1");
    assert!((r.ledger_total - 5.0).abs() < 1e-9);
}

#[test]
fn single_courier_replay_counts() {
    let out = run(&scenario("single_courier.json")).unwrap();
    let r = &out.report;
    assert_eq!(r.sensed["ParcelAccepted"], 2);
    assert_eq!(r.sensed["ParcelDelivered"], 1);
    for ty in ["HasMoved", "Speed", "DistanceToDestination"] {
        assert!(r.context.get(ty).copied().unwrap_or(0) > 0, "{ty}");
    }
    assert_eq!(r.deliveries, 1);
}

#[test]
fn report_matches_log_tallies() {
    for name in ["handover.json", "single_courier.json"] {
        let out = run(&scenario(name)).unwrap();
        let mut context = BTreeMap::new();
        let mut situations = BTreeMap::new();
        for e in &out.pipeline_log {
            match e["kind"].as_str().unwrap() {
                "emit" => {
                    *context
                        .entry(e["payload"]["type"].as_str().unwrap().to_owned())
                        .or_insert(0u64) += 1
                }
                "belief_add" => {
                    let lit = e["payload"].as_str().unwrap();
                    let functor = lit.split('(').next().unwrap().to_owned();
                    *situations.entry(functor).or_insert(0u64) += 1;
                }
                _ => {}
            }
        }
        assert_eq!(out.report.context, context, "{name}");
        assert_eq!(out.report.situations, situations, "{name}");
        let bids = of_kind(&out, "bid")
            .iter()
            .filter(|e| e.get("amount").is_some())
            .count() as u64;
        assert_eq!(out.report.bids, bids);
        assert_eq!(out.report.handovers, of_kind(&out, "handover").len() as u64);
    }
}

#[test]
fn runs_are_byte_identical() {
    let s = scenario("handover.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&s).unwrap().write_to(a.path()).unwrap();
    run(&s).unwrap().write_to(b.path()).unwrap();
    for f in ["agents.jsonl", "pipeline.jsonl", "report.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn zero_duration_is_empty() {
    let mut s = scenario("handover.json");
    s.duration_ms = 0;
    s.parcels.clear();
    let out = run(&s).unwrap();
    assert_eq!(out.report.ticks, 0);
    assert!(out.agent_log.is_empty());
    assert!(out.pipeline_log.is_empty());
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = scenario("handover.json");
    s.agents[1].id = "a0".into();
    assert!(matches!(run(&s), Err(SimError::ScenarioInvalid(m)) if m.contains("duplicate agent")));

    let mut s = scenario("handover.json");
    s.parcels[0].at_ms = s.duration_ms + 1;
    assert!(matches!(run(&s), Err(SimError::ScenarioInvalid(m)) if m.contains("after the end")));
}

#[test]
fn csv_trace_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.csv"),
        "timestamp_ms,lat,lon\n0,52.0,9.0\n1000,52.0,9.0\n500,52.0,9.0\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{"duration_ms": 5000, "agents": [{"id": "x", "trace": {"csv": "t.csv"}}]}"#,
    )
    .unwrap();
    let s = Scenario::load(&dir.path().join("s.json")).unwrap();
    match run(&s) {
        Err(SimError::Trace { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}
