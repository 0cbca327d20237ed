//! Auction lifecycle as agent plans: a stalled parcel is put up for
//! auction, nearby agents with a compatible route bid, the auctioneer picks
//! a winner when bidding closes and hands the parcel over.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{Agent, ContextCond, Cx, Plan, PlanStep, Trigger};
use crate::belief::{BeliefQuery, Bindings, Constant, Term};
use crate::event::{Event, GeoPoint, Timestamp, Value};
use crate::geo;

use super::ledger::Settlement;
use super::registry;
use super::strategy::{decide_bid, determine_winner, Auction, AuctionState, Bid, UserProfile, WinnerPolicy};

pub type CrowdAgent = Agent<DomainState>;

/// Tunable constants of the auction protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandoverPolicy {
    /// Radius of auction announcements (m).
    pub broadcast_radius_m: f64,
    /// Time a winner has to reach the parcel (s).
    pub pickup_deadline_s: f64,
    pub bidding_interval_ms: u64,
    /// The parcel changes hands once the winner is this close (m)...
    pub handover_radius_m: f64,
    /// ...or this long after the auction resolved, whichever comes first.
    pub handover_after_ms: u64,
    /// A holder this close to the destination delivers (m).
    pub delivery_radius_m: f64,
}

impl Default for HandoverPolicy {
    fn default() -> Self {
        Self {
            broadcast_radius_m: 1000.0,
            pickup_deadline_s: 300.0,
            bidding_interval_ms: 60_000,
            handover_radius_m: 15.0,
            handover_after_ms: 120_000,
            delivery_radius_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParcelStatus {
    InTransit,
    InAuction,
    Delivered,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Parcel {
    pub id: String,
    pub destination: GeoPoint,
    pub reward: f64,
    pub status: ParcelStatus,
}

/// A sold parcel waiting for its buyer to pick it up.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Handover {
    pub parcel: Parcel,
    pub seller: String,
    pub buyer: String,
    pub resolved_at: Timestamp,
}

/// A bid this agent sent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BidRecord {
    pub t: Timestamp,
    pub auction_id: String,
    pub amount: f64,
    pub eta_s: f64,
    pub pickup_deadline_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct DomainState {
    pub profile: UserProfile,
    pub policy: WinnerPolicy,
    pub protocol: HandoverPolicy,
    /// Parcels this agent holds or has delivered.
    pub parcels: BTreeMap<String, Parcel>,
    /// Auctions this agent runs.
    pub auctions: BTreeMap<String, Auction>,
    /// Auctions announced by others.
    pub heard: BTreeMap<String, Auction>,
    /// Estimated arrival (s) per heard auction.
    pub arrivals: BTreeMap<String, f64>,
    pub bids: Vec<BidRecord>,
    /// Last two movement positions.
    pub moves: Vec<GeoPoint>,
    pub handovers: Vec<Handover>,
    /// Balance changes not yet booked by the environment.
    pub settlements: Vec<Settlement>,
    opened: u32,
}

impl DomainState {
    pub fn new(profile: UserProfile, policy: WinnerPolicy, protocol: HandoverPolicy) -> Self {
        Self {
            profile,
            policy,
            protocol,
            ..Self::default()
        }
    }

    /// Movement bearing from the last two movement positions.
    pub fn heading(&self) -> Option<f64> {
        match self.moves.as_slice() {
            [.., a, b] => Some(geo::bearing(*a, *b)),
            _ => None,
        }
    }
}

fn var(name: &str) -> Term {
    Term::Var(name.to_owned())
}

fn lit(functor: &str, args: Vec<Term>) -> BeliefQuery {
    BeliefQuery::new(functor, args)
}

fn has_parcel(id: Term) -> BeliefQuery {
    lit("hasParcel", vec![id, Term::Placeholder, Term::Placeholder])
}

fn text(c: &Constant) -> String {
    match c {
        Constant::Atom(s) => s.clone(),
        Constant::Num(x) => x.to_string(),
    }
}

fn bound(b: &Bindings, v: &str) -> Result<String, String> {
    b.get(v).map(text).ok_or_else(|| format!("`{v}` is unbound"))
}

fn num(e: &Event, name: &str) -> Result<f64, String> {
    e.get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("{} lacks numeric `{name}`", e.event_type()))
}

fn txt(e: &Event, name: &str) -> Result<String, String> {
    e.get(name)
        .and_then(|v| v.as_text())
        .map(str::to_owned)
        .ok_or_else(|| format!("{} lacks text `{name}`", e.event_type()))
}

/// The plan library and domain hooks of a crowdshipping agent.
pub fn install_plans(agent: &mut CrowdAgent) {
    let p = || var("P");
    let a = || var("A");
    agent.add_plan(Plan {
        name: "sell-stalled-parcel".into(),
        trigger: Trigger::BeliefAdded(lit("SlowDeliveryProgress", vec![p()])),
        context: vec![
            ContextCond::Holds(has_parcel(p())),
            ContextCond::Check("not_in_auction".into()),
        ],
        body: vec![PlanStep::AdoptGoal {
            name: "sellParcel".into(),
            args: vec![p()],
        }],
    });
    agent.add_plan(Plan {
        name: "open-auction".into(),
        trigger: Trigger::GoalAdopted {
            name: "sellParcel".into(),
            args: vec![p()],
        },
        context: vec![],
        body: vec![PlanStep::Custom("open_auction".into())],
    });
    agent.add_plan(Plan {
        name: "consider-nearby-auction".into(),
        trigger: Trigger::BeliefAdded(lit("nearbyAuction", vec![a()])),
        context: vec![],
        body: vec![PlanStep::AdoptGoal {
            name: "obtainParcel".into(),
            args: vec![a()],
        }],
    });
    agent.add_plan(Plan {
        name: "bid".into(),
        trigger: Trigger::GoalAdopted {
            name: "obtainParcel".into(),
            args: vec![a()],
        },
        context: vec![ContextCond::Check("route_compatible".into())],
        body: vec![PlanStep::Custom("submit_bid".into())],
    });
    agent.add_plan(Plan {
        name: "close-auction".into(),
        trigger: Trigger::BeliefRemoved(lit("biddingOpen", vec![a()])),
        context: vec![],
        body: vec![PlanStep::Custom("close_auction".into())],
    });

    agent.add_check("not_in_auction", not_in_auction);
    agent.add_check("route_compatible", route_compatible);
    agent.add_hook("open_auction", open_auction);
    agent.add_hook("submit_bid", submit_bid);
    agent.add_hook("close_auction", close_auction);

    agent.observe("ParcelAccepted", on_parcel_accepted);
    agent.observe("ParcelDelivered", on_parcel_delivered);
    agent.observe("ParcelHandedOver", on_handed_over);
    agent.observe("HasMoved", on_moved);
    agent.observe("EstimatedArrival", on_arrival_estimate);
    agent.observe("AuctionOpened", on_auction_opened);
    agent.observe("Bid", on_bid);
    agent.observe("AuctionResult", on_result);
}

fn not_in_auction(cx: &mut Cx<DomainState>, b: &Bindings) -> bool {
    let Ok(p) = bound(b, "P") else { return false };
    cx.domain
        .parcels
        .get(&p)
        .is_some_and(|x| x.status == ParcelStatus::InTransit)
}

/// The parcel's destination lies within 90 degrees of the direction the
/// user has been moving in.
fn route_compatible(cx: &mut Cx<DomainState>, b: &Bindings) -> bool {
    let Ok(aid) = bound(b, "A") else { return false };
    let (Some(auction), Some(heading), Some(pos)) = (cx.domain.heard.get(&aid), cx.domain.heading(), cx.position)
    else {
        return false;
    };
    let to_dest = geo::bearing(pos, auction.destination);
    let ok = geo::bearing_difference(heading, to_dest) <= 90.0;
    if !ok {
        cx.log("plan_skipped", json!({"auction": aid, "reason": "route incompatible"}));
    }
    ok
}

fn open_auction(cx: &mut Cx<DomainState>, b: &Bindings) -> Result<(), String> {
    let pid = bound(b, "P")?;
    let at = cx.position.ok_or("no position to auction the parcel at")?;
    let parcel = cx
        .domain
        .parcels
        .get_mut(&pid)
        .ok_or_else(|| format!("not holding parcel {pid}"))?;
    parcel.status = ParcelStatus::InAuction;
    let parcel = parcel.clone();
    cx.domain.opened += 1;
    let protocol = cx.domain.protocol.clone();
    let auction = Auction {
        id: format!("{}_auction{}", cx.id, cx.domain.opened),
        parcel_id: pid.clone(),
        auctioneer: cx.id.to_owned(),
        location: at,
        destination: parcel.destination,
        reward: parcel.reward,
        pickup_deadline_s: protocol.pickup_deadline_s,
        bidding_interval_ms: protocol.bidding_interval_ms,
        opened_at: cx.now,
        bids: Vec::new(),
        state: AuctionState::Open,
    };
    let msg = registry()
        .make_event(
            "AuctionOpened",
            cx.now,
            [
                ("id", Value::from(auction.id.as_str())),
                ("parcelId", Value::from(pid.as_str())),
                ("auctioneer", Value::from(cx.id)),
                ("location", Value::Geo(at)),
                ("pickupDeadline", Value::Number(auction.pickup_deadline_s)),
                ("biddingInterval", Value::Number(auction.bidding_interval_ms as f64)),
                ("reward", Value::Number(parcel.reward)),
                ("destLat", Value::Number(parcel.destination.lat)),
                ("destLon", Value::Number(parcel.destination.lon)),
            ],
        )
        .map_err(|e| e.to_string())?;
    cx.add_belief(
        lit("biddingOpen", vec![Term::Const(Constant::Atom(auction.id.clone()))]),
        Some(auction.closes_at()),
    )?;
    cx.log("auction", json!({"opened": auction.id, "parcel": pid}));
    cx.domain.auctions.insert(auction.id.clone(), auction);
    cx.send(
        crate::agent::Recipient::BroadcastWithin(protocol.broadcast_radius_m),
        msg,
    );
    Ok(())
}

fn submit_bid(cx: &mut Cx<DomainState>, b: &Bindings) -> Result<(), String> {
    let aid = bound(b, "A")?;
    let auction = cx
        .domain
        .heard
        .get(&aid)
        .cloned()
        .ok_or_else(|| format!("unknown auction {aid}"))?;
    let eta = *cx
        .domain
        .arrivals
        .get(&aid)
        .ok_or_else(|| format!("no arrival estimate for {aid}"))?;
    let pos = cx.position.ok_or("no position")?;
    if eta >= auction.pickup_deadline_s {
        cx.log("bid", json!({"auction": aid, "declined": "cannot arrive in time"}));
        return Ok(());
    }
    let Some(amount) = decide_bid(&cx.domain.profile, &auction, pos) else {
        cx.log("bid", json!({"auction": aid, "declined": "not worth it"}));
        return Ok(());
    };
    let msg = registry()
        .make_event(
            "Bid",
            cx.now,
            [
                ("auctionId", Value::from(aid.as_str())),
                ("bidder", Value::from(cx.id)),
                ("amount", Value::Number(amount)),
                ("eta", Value::Number(eta)),
            ],
        )
        .map_err(|e| e.to_string())?;
    let record = BidRecord {
        t: cx.now,
        auction_id: aid.clone(),
        amount,
        eta_s: eta,
        pickup_deadline_s: auction.pickup_deadline_s,
    };
    cx.log("bid", serde_json::to_value(&record).map_err(|e| e.to_string())?);
    cx.domain.bids.push(record);
    cx.send(crate::agent::Recipient::Agent(auction.auctioneer.clone()), msg);
    Ok(())
}

fn close_auction(cx: &mut Cx<DomainState>, b: &Bindings) -> Result<(), String> {
    let aid = bound(b, "A")?;
    let policy = cx.domain.policy.clone();
    let auction = cx
        .domain
        .auctions
        .get_mut(&aid)
        .ok_or_else(|| format!("not running auction {aid}"))?;
    let outcome = determine_winner(auction, &policy, cx.now).map_err(|e| e.to_string())?;
    let auction = auction.clone();
    let pid = auction.parcel_id.clone();
    match outcome {
        Some((winner, price)) => {
            cx.log(
                "auction",
                json!({"resolved": aid, "winner": winner, "price": price, "bids": auction.bids.len()}),
            );
            let mut bidders: Vec<&str> = auction.bids.iter().map(|b| b.bidder.as_str()).collect();
            bidders.sort_unstable();
            bidders.dedup();
            for bidder in bidders {
                let msg = registry()
                    .make_event(
                        "AuctionResult",
                        cx.now,
                        [
                            ("auctionId", Value::from(aid.as_str())),
                            ("winner", Value::from(winner.as_str())),
                            ("price", Value::Number(price)),
                        ],
                    )
                    .map_err(|e| e.to_string())?;
                cx.send(crate::agent::Recipient::Agent(bidder.to_owned()), msg);
            }
            cx.domain.settlements.push(Settlement::Sale {
                seller: cx.id.to_owned(),
                buyer: winner.clone(),
                price,
            });
            let parcel = cx.domain.parcels.get(&pid).cloned().ok_or("sold parcel vanished")?;
            cx.domain.handovers.push(Handover {
                parcel,
                seller: cx.id.to_owned(),
                buyer: winner,
                resolved_at: cx.now,
            });
        }
        None => {
            cx.log("auction", json!({"failed": aid}));
            if let Some(p) = cx.domain.parcels.get_mut(&pid) {
                p.status = ParcelStatus::InTransit;
            }
            let pc = Constant::Atom(pid.clone());
            cx.drop_goal("sellParcel", std::slice::from_ref(&pc));
            cx.remove_belief(&lit("SlowDeliveryProgress", vec![Term::Const(pc)]));
        }
    }
    Ok(())
}

fn on_parcel_accepted(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let id = txt(e, "id")?;
    let dest = GeoPoint {
        lat: num(e, "destLat")?,
        lon: num(e, "destLon")?,
    };
    cx.domain.parcels.insert(
        id.clone(),
        Parcel {
            id: id.clone(),
            destination: dest,
            reward: num(e, "reward")?,
            status: ParcelStatus::InTransit,
        },
    );
    cx.add_belief(
        BeliefQuery::ground(
            "hasParcel",
            vec![Constant::Atom(id), Constant::Num(dest.lat), Constant::Num(dest.lon)],
        ),
        None,
    )
}

/// Drops every belief about a parcel that left this agent.
fn release(cx: &mut Cx<DomainState>, id: &str) {
    let c = || Term::Const(Constant::Atom(id.to_owned()));
    cx.remove_belief(&has_parcel(c()));
    cx.remove_belief(&lit("SlowDeliveryProgress", vec![c()]));
    cx.drop_goal("sellParcel", &[Constant::Atom(id.to_owned())]);
}

fn on_parcel_delivered(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let id = txt(e, "id")?;
    let parcel = cx
        .domain
        .parcels
        .get_mut(&id)
        .ok_or_else(|| format!("delivered parcel {id} is not held"))?;
    if parcel.status == ParcelStatus::Delivered {
        return Ok(());
    }
    parcel.status = ParcelStatus::Delivered;
    let reward = parcel.reward;
    cx.domain.settlements.push(Settlement::Delivery {
        holder: cx.id.to_owned(),
        reward,
    });
    release(cx, &id);
    Ok(())
}

fn on_handed_over(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let id = txt(e, "id")?;
    if txt(e, "from")? == cx.id {
        cx.domain.parcels.remove(&id);
        release(cx, &id);
    }
    Ok(())
}

fn on_moved(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let at = e.position().ok_or("movement without position")?;
    cx.domain.moves.push(at);
    if cx.domain.moves.len() > 2 {
        cx.domain.moves.remove(0);
    }
    Ok(())
}

fn on_arrival_estimate(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let aid = txt(e, "auctionId")?;
    cx.domain.arrivals.insert(aid, num(e, "estimatedArrivalTime")?);
    Ok(())
}

fn on_auction_opened(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let location = match e.get("location") {
        Some(Value::Geo(p)) => *p,
        _ => return Err("AuctionOpened without location".into()),
    };
    let auction = Auction {
        id: txt(e, "id")?,
        parcel_id: txt(e, "parcelId")?,
        auctioneer: txt(e, "auctioneer")?,
        location,
        destination: GeoPoint {
            lat: num(e, "destLat")?,
            lon: num(e, "destLon")?,
        },
        reward: num(e, "reward")?,
        pickup_deadline_s: num(e, "pickupDeadline")?,
        bidding_interval_ms: num(e, "biddingInterval")? as u64,
        opened_at: e.timestamp(),
        bids: Vec::new(),
        state: AuctionState::Open,
    };
    cx.domain.heard.insert(auction.id.clone(), auction);
    Ok(())
}

fn on_bid(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let aid = txt(e, "auctionId")?;
    let bid = Bid {
        bidder: txt(e, "bidder")?,
        amount: num(e, "amount")?,
        eta_s: num(e, "eta")?,
    };
    let now = cx.now;
    let auction = cx
        .domain
        .auctions
        .get_mut(&aid)
        .ok_or_else(|| format!("bid for unknown auction {aid}"))?;
    auction.submit(bid, now).map_err(|e| e.to_string())
}

fn on_result(cx: &mut Cx<DomainState>, e: &Event) -> Result<(), String> {
    let aid = txt(e, "auctionId")?;
    let won = txt(e, "winner")? == cx.id;
    cx.log("auction", json!({"result": aid, "won": won}));
    let a = Constant::Atom(aid);
    cx.drop_goal("obtainParcel", std::slice::from_ref(&a));
    cx.remove_belief(&lit("nearbyAuction", vec![Term::Const(a)]));
    Ok(())
}
