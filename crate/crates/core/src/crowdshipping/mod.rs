//! Crowdshipping domain: event schemas, the rule corpus, bidding and
//! winner determination, the ledger, and the agent plans that run auctions.

mod ledger;
mod plans;
mod strategy;

use std::sync::Arc;

use crate::engine::{EngineError, PerceptionPipeline, Services};
use crate::epl::{parse_rules, validate_ruleset, DependencyReport, EplError, Rule};
use crate::event::{Category, Event, EventSchema, SchemaRegistry, Value, ValueKind};

pub use crate::geo::distance as geo_distance;
pub use ledger::{settle, Ledger, Settlement};
pub use plans::{install_plans, BidRecord, CrowdAgent, DomainState, Handover, HandoverPolicy, Parcel, ParcelStatus};
pub use strategy::{
    compute_speed, decide_bid, determine_winner, estimate_arrival, Auction, AuctionState, Bid, DomainError,
    UserProfile, WinnerPolicy,
};

/// Rule files shipped with the crate, in evaluation order.
pub const RULE_FILES: &[(&str, &str)] = &[
    ("plausible_gps.epl", include_str!("../../rules/plausible_gps.epl")),
    ("has_moved.epl", include_str!("../../rules/has_moved.epl")),
    ("speed.epl", include_str!("../../rules/speed.epl")),
    (
        "r1a_distance_to_destination.epl",
        include_str!("../../rules/r1a_distance_to_destination.epl"),
    ),
    (
        "r1b_slow_delivery.epl",
        include_str!("../../rules/r1b_slow_delivery.epl"),
    ),
    (
        "r2a_estimate_arrival.epl",
        include_str!("../../rules/r2a_estimate_arrival.epl"),
    ),
    (
        "r2b_nearby_auction.epl",
        include_str!("../../rules/r2b_nearby_auction.epl"),
    ),
];

/// Event types of the crowdshipping system. `GPS` is accepted as an
/// alternative spelling of `Gps`.
pub fn registry() -> SchemaRegistry {
    use Category::*;
    use ValueKind::{Geo, Number, Text};
    let schemas = [
        EventSchema::new("Gps", SensorData, &[("lat", Number), ("lon", Number)]),
        EventSchema::new("ClockTick", SensorData, &[]),
        EventSchema::new(
            "ParcelAccepted",
            DomainEvent,
            &[
                ("id", Text),
                ("destLat", Number),
                ("destLon", Number),
                ("reward", Number),
            ],
        ),
        EventSchema::new("ParcelDelivered", DomainEvent, &[("id", Text)]),
        EventSchema::new(
            "ParcelHandedOver",
            DomainEvent,
            &[("id", Text), ("from", Text), ("to", Text)],
        ),
        EventSchema::new(
            "HasMoved",
            Context,
            &[("lat", Number), ("lon", Number), ("distance", Number)],
        ),
        EventSchema::new("Speed", Context, &[("value", Number)]),
        EventSchema::new(
            "DistanceToDestination",
            Context,
            &[("value", Number), ("parcelId", Text)],
        ),
        EventSchema::new("UserLocation", Context, &[("location", Geo)]),
        EventSchema::new(
            "EstimatedArrival",
            Context,
            &[("auctionId", Text), ("estimatedArrivalTime", Number)],
        ),
        EventSchema::new("SlowDeliveryProgress", Situation, &[("parcelId", Text)]),
        EventSchema::new(
            "AuctionOpened",
            Message,
            &[
                ("id", Text),
                ("parcelId", Text),
                ("auctioneer", Text),
                ("location", Geo),
                ("pickupDeadline", Number),
                ("biddingInterval", Number),
                ("reward", Number),
                ("destLat", Number),
                ("destLon", Number),
            ],
        ),
        EventSchema::new(
            "Bid",
            Message,
            &[
                ("auctionId", Text),
                ("bidder", Text),
                ("amount", Number),
                ("eta", Number),
            ],
        ),
        EventSchema::new(
            "AuctionResult",
            Message,
            &[("auctionId", Text), ("winner", Text), ("price", Number)],
        ),
    ];
    let mut reg = SchemaRegistry::new();
    for s in schemas {
        reg.register(s).expect("schema names are distinct");
    }
    reg.alias("GPS", "Gps").expect("Gps registered");
    reg
}

/// Parses the shipped rule files and validates their dependency graph.
pub fn load_rule_corpus() -> Result<(Vec<Rule>, DependencyReport), EplError> {
    let reg = registry();
    let mut rules = Vec::new();
    for (_, text) in RULE_FILES {
        rules.extend(parse_rules(text, &reg)?);
    }
    let report = validate_ruleset(&rules, &reg)?;
    Ok((rules, report))
}

/// Pipeline over the shipped rules, with GPS fixes also seen as user
/// locations.
pub fn perception_pipeline() -> Result<PerceptionPipeline, EngineError> {
    let (rules, _) = load_rule_corpus()?;
    pipeline_for(rules)
}

/// Pipeline over `rules` with the domain registry, services and projections.
pub fn pipeline_for(rules: Vec<Rule>) -> Result<PerceptionPipeline, EngineError> {
    let mut p = PerceptionPipeline::new(rules, Arc::new(registry()), Services::default())?;
    p.add_projection("Gps", gps_to_location);
    Ok(p)
}

fn gps_to_location(gps: &Event, reg: &SchemaRegistry) -> Option<Event> {
    let at = gps.position()?;
    reg.make_event("UserLocation", gps.timestamp(), [("location", Value::Geo(at))])
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_has_seven_rules_and_expected_edges() {
        let (rules, report) = load_rule_corpus().unwrap();
        assert_eq!(rules.len(), 7);
        assert_eq!(report.guarded_types, vec!["Gps".to_owned()]);
        assert!(report.has_edge("Detect movement", "R.1a: \"Compute distance to destination\""));
        assert!(report.has_edge("Detect movement", "Compute speed"));
        assert!(report.has_edge(
            "R.2a: \"Estimate arrival time at auction\"",
            "R.2b: \"Consider bidding if auction can be reached in time\""
        ));
    }
}
