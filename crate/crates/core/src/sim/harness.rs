//! The multi-agent tick loop and its environment: trace playback, parcel
//! injections, message delivery, handovers, deliveries and the ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::agent::{deliver, LogEntry};
use crate::belief::BeliefQuery;
use crate::crowdshipping::{
    install_plans, pipeline_for, registry, settle, CrowdAgent, DomainState, Ledger, ParcelStatus, Settlement,
};
use crate::engine::PipelineOutput;
use crate::event::{Event, SchemaRegistry, Timestamp, Value};
use crate::geo;

use super::replay::load_rules_dir;
use super::scenario::Scenario;
use super::trace::Fix;
use super::SimError;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuctionTally {
    pub opened: u64,
    pub resolved: u64,
    pub failed: u64,
}

/// Outcome of a scenario run. Contains no wall-clock data, so equal
/// scenarios give equal reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub ticks: u64,
    pub agents: usize,
    /// Percepts handed to agents, per type.
    pub sensed: BTreeMap<String, u64>,
    /// GPS fixes dropped by expectations.
    pub filtered: u64,
    /// Context events derived by rules, per type.
    pub context: BTreeMap<String, u64>,
    /// Beliefs added by rules, per functor.
    pub situations: BTreeMap<String, u64>,
    /// Delivered messages, per payload type.
    pub messages: BTreeMap<String, u64>,
    pub auctions: AuctionTally,
    pub bids: u64,
    pub handovers: u64,
    pub deliveries: u64,
    pub ledger: BTreeMap<String, f64>,
    pub ledger_total: f64,
}

/// Report plus the two JSON-lines logs.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub report: RunReport,
    /// Agent and environment records.
    pub agent_log: Vec<Json>,
    /// Pipeline outputs, tagged with the agent.
    pub pipeline_log: Vec<Json>,
}

impl RunOutput {
    /// Writes `agents.jsonl`, `pipeline.jsonl` and `report.json`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        let lines = |name: &str, recs: &[Json]| -> Result<(), SimError> {
            let path = dir.join(name);
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| SimError::io(&path, e))?);
            for r in recs {
                writeln!(f, "{r}").map_err(|e| SimError::io(&path, e))?;
            }
            f.flush().map_err(|e| SimError::io(&path, e))
        };
        lines("agents.jsonl", &self.agent_log)?;
        lines("pipeline.jsonl", &self.pipeline_log)?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| SimError::io(&path, e))
    }
}

fn gps(reg: &SchemaRegistry, f: &Fix) -> Event {
    reg.make_event(
        "Gps",
        f.timestamp_ms,
        [("lat", Value::Number(f.lat)), ("lon", Value::Number(f.lon))],
    )
    .expect("Gps schema")
}

fn env_log(t: Timestamp, agent: &str, kind: &'static str, detail: Json) -> Json {
    LogEntry {
        t,
        agent: agent.to_owned(),
        kind,
        detail,
    }
    .to_json()
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let reg = registry();
    let rules = match &scenario.rules {
        Some(dir) => Some(load_rules_dir(&scenario.base_dir.join(dir))?),
        None => None,
    };

    let mut specs = scenario.agents.clone();
    specs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut agents: Vec<CrowdAgent> = Vec::with_capacity(specs.len());
    let mut traces: Vec<(Vec<Fix>, usize)> = Vec::with_capacity(specs.len());
    for spec in &specs {
        let pipeline = match &rules {
            Some(r) => pipeline_for(r.clone())?,
            None => crate::crowdshipping::perception_pipeline()?,
        };
        let domain = DomainState::new(spec.profile.clone(), scenario.policy.clone(), scenario.protocol.clone());
        let mut agent = CrowdAgent::new(&spec.id, pipeline, domain);
        install_plans(&mut agent);
        for b in &spec.beliefs {
            let q = BeliefQuery::parse(b)
                .map_err(|e| SimError::ScenarioInvalid(format!("agent `{}` belief `{b}`: {e}", spec.id)))?;
            agent
                .beliefs
                .add(q, 0, None)
                .map_err(|e| SimError::ScenarioInvalid(format!("agent `{}` belief `{b}`: {e}", spec.id)))?;
        }
        agents.push(agent);
        traces.push((scenario.trace(spec)?, 0));
    }
    let index: BTreeMap<String, usize> = agents.iter().enumerate().map(|(i, a)| (a.id.clone(), i)).collect();

    let mut out = RunOutput::default();
    let report = &mut out.report;
    report.agents = agents.len();
    let mut ledger = Ledger::new();
    // Environment percepts waiting for an agent's next cycle.
    let mut queued: Vec<Vec<Event>> = vec![Vec::new(); agents.len()];
    let mut injected: BTreeSet<usize> = BTreeSet::new();
    let mut delivered: BTreeSet<String> = BTreeSet::new();
    let mut scripted: Vec<_> = scenario.deliveries.clone();
    scripted.sort_by(|a, b| (a.at_ms, &a.parcel).cmp(&(b.at_ms, &b.parcel)));
    let mut scripted = scripted.into_iter().peekable();
    let step_ms = scenario.tick_ms;
    let latency = scenario.latency_ticks * step_ms;

    let mut tick = 0;
    while scenario.duration_ms > 0 && tick <= scenario.duration_ms {
        report.ticks += 1;
        // Scripted deliveries go to whoever holds the parcel now.
        while let Some(d) = scripted.next_if(|d| d.at_ms <= tick) {
            let holder = agents.iter().position(|a| {
                a.domain
                    .parcels
                    .get(&d.parcel)
                    .is_some_and(|p| p.status != ParcelStatus::Delivered)
            });
            match holder {
                Some(i) if delivered.insert(d.parcel.clone()) => {
                    let ev = reg
                        .make_event("ParcelDelivered", d.at_ms, [("id", Value::from(d.parcel.as_str()))])
                        .expect("schema");
                    queued[i].push(ev);
                }
                _ => out.agent_log.push(env_log(
                    tick,
                    "env",
                    "error",
                    json!({"message": format!("scripted delivery of `{}` has no holder", d.parcel)}),
                )),
            }
        }

        let mut outbound = Vec::new();
        for (i, agent) in agents.iter_mut().enumerate() {
            let mut percepts = std::mem::take(&mut queued[i]);
            for (k, p) in scenario.parcels.iter().enumerate() {
                if p.holder == agent.id && p.at_ms <= tick && injected.insert(k) {
                    percepts.push(
                        reg.make_event(
                            "ParcelAccepted",
                            p.at_ms,
                            [
                                ("id", Value::from(p.id.as_str())),
                                ("destLat", Value::Number(p.destination.lat)),
                                ("destLon", Value::Number(p.destination.lon)),
                                ("reward", Value::Number(p.reward)),
                            ],
                        )
                        .expect("schema"),
                    );
                }
            }
            let (trace, cursor) = &mut traces[i];
            while *cursor < trace.len() && trace[*cursor].timestamp_ms <= tick {
                percepts.push(gps(&reg, &trace[*cursor]));
                *cursor += 1;
            }
            percepts.push(
                reg.make_event("ClockTick", tick, Vec::<(String, Value)>::new())
                    .expect("schema"),
            );
            for p in &percepts {
                *report.sensed.entry(p.event_type().to_owned()).or_default() += 1;
            }

            let gps_in = percepts.iter().filter(|p| p.event_type() == "Gps").count() as u64;
            let step = agent.step(tick, percepts)?;
            let gps_out = step
                .pipeline
                .iter()
                .filter(|o| matches!(o, PipelineOutput::Forward { event, .. } if event.event_type() == "Gps"))
                .count() as u64;
            report.filtered += gps_in.saturating_sub(gps_out);
            for o in &step.pipeline {
                match o {
                    PipelineOutput::Emit { event, .. } => {
                        *report.context.entry(event.event_type().to_owned()).or_default() += 1
                    }
                    PipelineOutput::BeliefAdd { literal, .. } => {
                        *report.situations.entry(literal.functor.clone()).or_default() += 1
                    }
                    _ => {}
                }
                let mut rec = o.to_json();
                rec["agent"] = json!(agent.id);
                out.pipeline_log.push(rec);
            }
            for e in &step.log {
                if e.kind == "auction" {
                    if e.detail.get("opened").is_some() {
                        report.auctions.opened += 1;
                    } else if e.detail.get("resolved").is_some() {
                        report.auctions.resolved += 1;
                    } else if e.detail.get("failed").is_some() {
                        report.auctions.failed += 1;
                    }
                }
                if e.kind == "bid" && e.detail.get("amount").is_some() {
                    report.bids += 1;
                }
                out.agent_log.push(e.to_json());
            }
            for s in std::mem::take(&mut agent.domain.settlements) {
                if matches!(s, Settlement::Delivery { .. }) {
                    report.deliveries += 1;
                }
                settle(&s, &mut ledger);
                out.agent_log
                    .push(env_log(tick, &agent.id, "settlement", json!({"settlement": s})));
            }
            outbound.extend(step.messages.into_iter().map(|m| (agent.id.clone(), m)));
        }

        let before: Vec<usize> = agents.iter().map(|a| a.inbox_len()).collect();
        for e in deliver(outbound, &mut agents, tick, latency) {
            out.agent_log.push(e.to_json());
        }
        for (a, b) in agents.iter().zip(before) {
            for m in a.inbox().iter().skip(b) {
                *report.messages.entry(m.payload.event_type().to_owned()).or_default() += 1;
            }
        }

        let next = tick + step_ms;
        environment(
            &reg,
            &mut agents,
            &index,
            tick,
            next,
            &mut queued,
            &mut delivered,
            &mut out.agent_log,
            report,
        );
        tick = next;
    }

    let report = &mut out.report;
    report.ledger = ledger.balances().clone();
    report.ledger_total = ledger.total();
    Ok(out)
}

/// Handovers and proximity deliveries detected after a tick; the resulting
/// percepts reach the agents at `next`.
#[allow(clippy::too_many_arguments)]
fn environment(
    reg: &SchemaRegistry,
    agents: &mut [CrowdAgent],
    index: &BTreeMap<String, usize>,
    tick: Timestamp,
    next: Timestamp,
    queued: &mut [Vec<Event>],
    delivered: &mut BTreeSet<String>,
    log: &mut Vec<Json>,
    report: &mut RunReport,
) {
    for s in 0..agents.len() {
        let seller_pos = agents[s].position();
        let protocol = agents[s].domain.protocol.clone();
        let pending = std::mem::take(&mut agents[s].domain.handovers);
        let mut keep = Vec::new();
        for h in pending {
            let Some(&b) = index.get(&h.buyer) else {
                log.push(env_log(
                    tick,
                    &h.seller,
                    "error",
                    json!({"message": format!("unknown buyer `{}`", h.buyer)}),
                ));
                continue;
            };
            let close = match (seller_pos, agents[b].position()) {
                (Some(p), Some(q)) => geo::distance(p, q) <= protocol.handover_radius_m,
                _ => false,
            };
            if !close && tick < h.resolved_at + protocol.handover_after_ms {
                keep.push(h);
                continue;
            }
            report.handovers += 1;
            log.push(env_log(
                tick,
                &h.seller,
                "handover",
                json!({"parcel": h.parcel.id, "from": h.seller, "to": h.buyer, "met": close}),
            ));
            queued[s].push(
                reg.make_event(
                    "ParcelHandedOver",
                    next,
                    [
                        ("id", Value::from(h.parcel.id.as_str())),
                        ("from", Value::from(h.seller.as_str())),
                        ("to", Value::from(h.buyer.as_str())),
                    ],
                )
                .expect("schema"),
            );
            queued[b].push(
                reg.make_event(
                    "ParcelAccepted",
                    next,
                    [
                        ("id", Value::from(h.parcel.id.as_str())),
                        ("destLat", Value::Number(h.parcel.destination.lat)),
                        ("destLon", Value::Number(h.parcel.destination.lon)),
                        ("reward", Value::Number(h.parcel.reward)),
                    ],
                )
                .expect("schema"),
            );
        }
        agents[s].domain.handovers = keep;
    }

    for (i, a) in agents.iter().enumerate() {
        let Some(pos) = a.position() else { continue };
        for p in a.domain.parcels.values() {
            if p.status == ParcelStatus::InTransit
                && geo::distance(pos, p.destination) <= a.domain.protocol.delivery_radius_m
                && delivered.insert(p.id.clone())
            {
                log.push(env_log(tick, &a.id, "delivery", json!({"parcel": p.id})));
                queued[i].push(
                    reg.make_event("ParcelDelivered", next, [("id", Value::from(p.id.as_str()))])
                        .expect("schema"),
                );
            }
        }
    }
}
