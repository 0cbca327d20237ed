use aep_core::agent::{deliver, Agent, ContextCond, Outbound, Plan, PlanStep, Recipient, Trigger};
use aep_core::belief::{BeliefQuery, Bindings, Constant, Term};
use aep_core::crowdshipping::{
    install_plans, perception_pipeline, registry, Auction, AuctionState, CrowdAgent, DomainState,
};
use aep_core::event::{Event, GeoPoint, Value};
use aep_core::geo::offset;

const HOME: GeoPoint = GeoPoint {
    lat: 52.3759,
    lon: 9.7320,
};

type Probe = Agent<Vec<String>>;

fn gps(t: u64, at: GeoPoint) -> Event {
    registry()
        .make_event(
            "Gps",
            t,
            [("lat", Value::Number(at.lat)), ("lon", Value::Number(at.lon))],
        )
        .unwrap()
}

fn probe(id: &str) -> Probe {
    Agent::new(id, perception_pipeline().unwrap(), Vec::new())
}

fn record(cx: &mut aep_core::agent::Cx<Vec<String>>, b: &Bindings) -> Result<(), String> {
    let x = b.get("X").map(|c| c.to_string()).unwrap_or_default();
    cx.domain.push(x);
    Ok(())
}

fn goal_plan(name: &str, goal: &str) -> Plan {
    Plan {
        name: name.into(),
        trigger: Trigger::GoalAdopted {
            name: goal.into(),
            args: vec![Term::Var("X".into())],
        },
        context: vec![],
        body: vec![PlanStep::Custom("record".into())],
    }
}

fn ping(t: u64) -> Event {
    registry()
        .make_event("ClockTick", t, Vec::<(String, Value)>::new())
        .unwrap()
}

#[test]
fn first_applicable_plan_wins() {
    let mut a = probe("a");
    a.add_hook("record", record);
    a.add_check("never", |_, _| false);
    let mut blocked = goal_plan("blocked", "g");
    blocked.context.push(ContextCond::Check("never".into()));
    a.add_plan(blocked);
    a.add_plan(goal_plan("first", "g"));
    a.add_plan(goal_plan("second", "g"));
    let out = a.adopt_goal("g", vec![Constant::Atom("x".into())], 0);
    let fired: Vec<_> = out.log.iter().filter(|e| e.kind == "plan_fired").collect();
    assert_eq!(fired.len(), 1);
    assert_eq!(fired[0].detail["plan"], "first");
    assert_eq!(a.domain, vec!["x".to_string()]);
}

#[test]
fn adopting_a_held_goal_triggers_once() {
    let mut a = probe("a");
    a.add_hook("record", record);
    a.add_plan(goal_plan("p", "g"));
    let args = vec![Constant::Atom("x".into())];
    a.adopt_goal("g", args.clone(), 0);
    let again = a.adopt_goal("g", args, 0);
    assert!(again.log.iter().all(|e| e.kind != "plan_fired"));
    assert_eq!(a.domain.len(), 1);
    assert_eq!(a.goals.len(), 1);
}

#[test]
fn broadcast_reaches_agents_within_radius() {
    let mut agents: Vec<Probe> = ["s", "r200", "r800", "r1500"].iter().map(|id| probe(id)).collect();
    let at = [0.0, 200.0, 800.0, 1500.0];
    for (a, d) in agents.iter_mut().zip(at) {
        a.step(0, vec![gps(0, offset(HOME, 0.0, d))]).unwrap();
    }
    let out = vec![(
        "s".to_string(),
        Outbound {
            to: Recipient::BroadcastWithin(1000.0),
            payload: ping(0),
        },
    )];
    let log = deliver(out, &mut agents, 0, 1000);
    assert!(log.is_empty());
    let got: Vec<usize> = agents.iter().map(|a| a.inbox_len()).collect();
    assert_eq!(got, vec![0, 1, 1, 0]);
}

#[test]
fn messages_arrive_after_the_latency() {
    let mut agents = vec![probe("a"), probe("b")];
    let out = vec![(
        "a".to_string(),
        Outbound {
            to: Recipient::Agent("b".into()),
            payload: ping(1000),
        },
    )];
    deliver(out, &mut agents, 1000, 1000);
    let now = agents[1].step(1000, vec![]).unwrap();
    assert!(now.log.iter().all(|e| e.kind != "msg_in"));
    let next = agents[1].step(2000, vec![]).unwrap();
    assert_eq!(next.log.iter().filter(|e| e.kind == "msg_in").count(), 1);
    assert_eq!(agents[1].inbox_len(), 0);
}

#[test]
fn unknown_recipient_is_dropped_and_logged() {
    let mut agents = vec![probe("a")];
    let out = vec![(
        "a".to_string(),
        Outbound {
            to: Recipient::Agent("ghost".into()),
            payload: ping(0),
        },
    )];
    let log = deliver(out, &mut agents, 0, 1000);
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].kind, "error");
    assert!(log[0].detail["message"].as_str().unwrap().contains("ghost"));
}

#[test]
fn empty_cycle_only_advances_time() {
    let mut a = probe("a");
    let out = a.step(5000, vec![]).unwrap();
    assert!(out.messages.is_empty() && out.log.is_empty() && out.pipeline.is_empty());
    assert_eq!(a.pipeline().watermark(), Some(5000));
    assert!(a.step(4000, vec![]).is_err());
}

fn courier_heading_north() -> CrowdAgent {
    let mut a = CrowdAgent::new("c", perception_pipeline().unwrap(), DomainState::default());
    install_plans(&mut a);
    for (i, n) in [0.0, 10.0, 20.0].into_iter().enumerate() {
        let t = i as u64 * 1000;
        a.step(t, vec![gps(t, offset(HOME, 0.0, n))]).unwrap();
    }
    a
}

fn heard(a: &mut CrowdAgent, dest_north_m: f64) {
    let auction = Auction {
        id: "x1".into(),
        parcel_id: "p9".into(),
        auctioneer: "s".into(),
        location: offset(HOME, 0.0, 100.0),
        destination: offset(HOME, 0.0, dest_north_m),
        reward: 5.0,
        pickup_deadline_s: 300.0,
        bidding_interval_ms: 60_000,
        opened_at: 2000,
        bids: vec![],
        state: AuctionState::Open,
    };
    a.domain.heard.insert("x1".into(), auction);
    a.domain.arrivals.insert("x1".into(), 40.0);
}

#[test]
fn route_incompatible_auction_gets_no_bid() {
    let mut a = courier_heading_north();
    heard(&mut a, -1500.0);
    let out = a.adopt_goal("obtainParcel", vec![Constant::Atom("x1".into())], 2000);
    assert!(out.messages.is_empty());
    assert!(out.log.iter().any(|e| e.kind == "plan_skipped"));
}

#[test]
fn route_compatible_auction_gets_a_bid() {
    let mut a = courier_heading_north();
    heard(&mut a, 1500.0);
    let out = a.adopt_goal("obtainParcel", vec![Constant::Atom("x1".into())], 2000);
    assert_eq!(out.messages.len(), 1);
    assert_eq!(out.messages[0].payload.event_type(), "Bid");
    assert_eq!(out.messages[0].to, Recipient::Agent("s".into()));
}

#[test]
fn stalled_parcel_opens_an_auction() {
    let mut a = CrowdAgent::new("s", perception_pipeline().unwrap(), DomainState::default());
    install_plans(&mut a);
    let accepted = registry()
        .make_event(
            "ParcelAccepted",
            0,
            [
                ("id", Value::from("p1")),
                ("destLat", Value::Number(52.40)),
                ("destLon", Value::Number(9.7320)),
                ("reward", Value::Number(5.0)),
            ],
        )
        .unwrap();
    a.step(0, vec![accepted, gps(0, HOME)]).unwrap();
    let mut broadcast = None;
    for t in (1000..=300_000).step_by(1000) {
        let out = a.step(t, vec![gps(t, HOME)]).unwrap();
        if let Some(m) = out
            .messages
            .into_iter()
            .find(|m| m.payload.event_type() == "AuctionOpened")
        {
            broadcast = Some((t, m));
            break;
        }
    }
    let (t, m) = broadcast.expect("auction opened");
    assert_eq!(t, 300_000);
    assert_eq!(m.to, Recipient::BroadcastWithin(1000.0));
    assert!(a.beliefs.contains(&BeliefQuery::new(
        "SlowDeliveryProgress",
        vec![Term::Const(Constant::Atom("p1".into()))]
    )));
}
