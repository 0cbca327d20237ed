//! Single-pipeline trace replay and rule-directory checking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::belief::{BeliefBase, BeliefQuery, Constant, Term};
use crate::crowdshipping::{pipeline_for, registry};
use crate::engine::{compile, PipelineOutput, Services};
use crate::epl::{parse_rules, validate_ruleset, DependencyReport, Rule};
use crate::event::{Event, GeoPoint, SchemaRegistry, Timestamp, Value};

use super::trace::Fix;
use super::{read_json, SimError};

/// A domain event scripted into a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEvent {
    #[serde(rename = "type")]
    pub event_type: String,
    pub t: Timestamp,
    /// Numbers, strings, booleans, or `{"lat", "lon"}` objects.
    #[serde(default)]
    pub attrs: serde_json::Map<String, Json>,
}

/// Beliefs held from the start plus scripted domain events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    #[serde(default)]
    pub beliefs: Vec<String>,
    #[serde(default)]
    pub events: Vec<InjectedEvent>,
}

impl Injection {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        read_json(path)
    }

    fn events(&self, reg: &SchemaRegistry) -> Result<Vec<Event>, SimError> {
        let bad = |m: String| SimError::ScenarioInvalid(m);
        self.events
            .iter()
            .map(|e| {
                let attrs = e
                    .attrs
                    .iter()
                    .map(|(k, v)| {
                        Ok((
                            k.clone(),
                            json_value(v).ok_or_else(|| bad(format!("`{k}`: unsupported value {v}")))?,
                        ))
                    })
                    .collect::<Result<Vec<(String, Value)>, SimError>>()?;
                reg.make_event(&e.event_type, e.t, attrs)
                    .map_err(|err| bad(format!("injected {} at {}: {err}", e.event_type, e.t)))
            })
            .collect()
    }
}

fn json_value(v: &Json) -> Option<Value> {
    match v {
        Json::Bool(b) => Some(Value::Boolean(*b)),
        Json::Number(n) => n.as_f64().map(Value::Number),
        Json::String(s) => Some(Value::Text(s.clone())),
        Json::Object(o) => {
            let lat = o.get("lat")?.as_f64()?;
            let lon = o.get("lon")?.as_f64()?;
            GeoPoint::new(lat, lon).ok().map(Value::Geo)
        }
        _ => None,
    }
}

/// Event counts of a replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    /// Percepts fed to the pipeline, per type.
    pub sensed: BTreeMap<String, u64>,
    /// Guarded percepts that passed, per type.
    pub forwarded: BTreeMap<String, u64>,
    /// Guarded percepts an expectation rejected, per type.
    pub dropped: BTreeMap<String, u64>,
    /// Derived context events, per type.
    pub context: BTreeMap<String, u64>,
    /// Belief additions from situation rules, per functor.
    pub situations: BTreeMap<String, u64>,
    /// Beliefs the base gained, whatever the source.
    pub belief_adds: u64,
    /// Beliefs the base lost.
    pub belief_removals: u64,
    /// Evaluation errors raised by rules.
    pub rule_errors: u64,
    /// The full output stream, in order.
    #[serde(skip)]
    pub outputs: Vec<PipelineOutput>,
}

impl ReplayReport {
    fn count(&self, map: &BTreeMap<String, u64>, key: &str) -> u64 {
        map.get(key).copied().unwrap_or(0)
    }

    pub fn context_count(&self, event_type: &str) -> u64 {
        self.count(&self.context, event_type)
    }

    pub fn situation_count(&self, functor: &str) -> u64 {
        self.count(&self.situations, functor)
    }

    /// Table-style text: one `category type count` row per line.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (cat, map) in [
            ("sensed", &self.sensed),
            ("forwarded", &self.forwarded),
            ("dropped", &self.dropped),
            ("context", &self.context),
            ("situation", &self.situations),
        ] {
            for (k, v) in map {
                s.push_str(&format!("{cat:<10} {k:<24} {v}\n"));
            }
        }
        s.push_str(&format!("{:<10} {:<24} {}\n", "beliefs", "added", self.belief_adds));
        s.push_str(&format!(
            "{:<10} {:<24} {}\n",
            "beliefs", "removed", self.belief_removals
        ));
        s
    }
}

/// Parses every `*.epl` file in `dir` (sorted by name) and validates the
/// set. Problems are reported as `file:line:col: message`.
pub fn load_rules_dir(dir: &Path) -> Result<Vec<Rule>, SimError> {
    Ok(check_rules(dir)?.rules)
}

/// Result of a clean rule check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub files: Vec<PathBuf>,
    pub rules: Vec<Rule>,
    pub dependencies: DependencyReport,
}

impl CheckReport {
    /// One `from --via--> to` line per dependency edge.
    pub fn graph(&self) -> String {
        let mut s = String::new();
        for e in &self.dependencies.edges {
            s.push_str(&format!("{} --{}--> {} ({:?})\n", e.from, e.via, e.to, e.kind));
        }
        for g in &self.dependencies.guarded_types {
            s.push_str(&format!("guarded {g}\n"));
        }
        s
    }
}

pub fn check_rules(dir: &Path) -> Result<CheckReport, SimError> {
    let reg = registry();
    let rd = std::fs::read_dir(dir).map_err(|e| SimError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| SimError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "epl") {
            files.push(p);
        }
    }
    files.sort();
    let mut rules = Vec::new();
    let mut origin = Vec::new();
    let mut problems = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| SimError::io(f, e))?;
        match parse_rules(&text, &reg) {
            Ok(rs) => {
                origin.extend(rs.iter().map(|r| (r.name.clone(), f.display().to_string())));
                rules.extend(rs);
            }
            Err(e) => problems.push(e.diagnostic(&f.display().to_string())),
        }
    }
    if !problems.is_empty() {
        return Err(SimError::Rules(problems));
    }
    let dependencies =
        validate_ruleset(&rules, &reg).map_err(|e| SimError::Rules(vec![e.diagnostic(&dir.display().to_string())]))?;
    let reg = std::sync::Arc::new(reg);
    let services = Services::default();
    for r in &rules {
        if let Err(e) = compile(r, reg.clone(), &services) {
            let file = origin
                .iter()
                .find(|(n, _)| *n == r.name)
                .map_or("", |(_, f)| f.as_str());
            problems.push(format!("{file}: {e}"));
        }
    }
    if !problems.is_empty() {
        return Err(SimError::Rules(problems));
    }
    Ok(CheckReport {
        files,
        rules,
        dependencies,
    })
}

/// Replays a trace file through the rules in `rules_dir`, or the shipped
/// corpus when `None`.
pub fn replay(trace: &Path, rules_dir: Option<&Path>, injection: &Injection) -> Result<ReplayReport, SimError> {
    let fixes = super::trace::read_trace(trace)?;
    let rules = match rules_dir {
        Some(d) => Some(load_rules_dir(d)?),
        None => None,
    };
    replay_events(&fixes, rules, injection)
}

/// Replays fixes and injected events through one pipeline. Injected events
/// come before fixes with the same timestamp. The belief base receives the
/// pipeline's belief changes and the minimal parcel bookkeeping an agent
/// would do: `hasParcel` on acceptance, cleared on delivery.
pub fn replay_events(fixes: &[Fix], rules: Option<Vec<Rule>>, injection: &Injection) -> Result<ReplayReport, SimError> {
    let reg = registry();
    let rules = match rules {
        Some(r) => r,
        None => {
            crate::crowdshipping::load_rule_corpus()
                .map_err(crate::engine::EngineError::from)?
                .0
        }
    };
    let mut pipeline = pipeline_for(rules)?;
    let mut bb = BeliefBase::new();
    for b in &injection.beliefs {
        let q = BeliefQuery::parse(b).map_err(|e| SimError::ScenarioInvalid(format!("belief `{b}`: {e}")))?;
        bb.add(q, 0, None)
            .map_err(|e| SimError::ScenarioInvalid(format!("belief `{b}`: {e}")))?;
    }

    let mut injected = injection.events(&reg)?;
    injected.sort_by_key(|e| e.timestamp());
    let mut stream = Vec::with_capacity(fixes.len() + injected.len());
    let mut inj = injected.into_iter().peekable();
    for f in fixes {
        while let Some(e) = inj.next_if(|e| e.timestamp() <= f.timestamp_ms) {
            stream.push(e);
        }
        stream.push(
            reg.make_event(
                "Gps",
                f.timestamp_ms,
                [("lat", Value::Number(f.lat)), ("lon", Value::Number(f.lon))],
            )
            .expect("Gps schema"),
        );
    }
    stream.extend(inj);

    let guarded = pipeline.dependency_report().guarded_types.clone();
    let mut report = ReplayReport::default();
    let mut last = 0;
    for ev in stream {
        let t = ev.timestamp();
        last = t;
        let ty = ev.event_type().to_owned();
        *report.sensed.entry(ty.clone()).or_default() += 1;
        let bookkeeping = parcel_bookkeeping(&ev);
        let out = pipeline.ingest(ev, &bb)?;
        if guarded.contains(&ty) {
            let passed = out
                .iter()
                .any(|o| matches!(o, PipelineOutput::Forward { event, .. } if event.event_type() == ty && event.timestamp() == t));
            let map = if passed {
                &mut report.forwarded
            } else {
                &mut report.dropped
            };
            *map.entry(ty).or_default() += 1;
        }
        absorb(out, &mut bb, &mut report)?;
        match bookkeeping {
            Some(Ok(q)) => {
                if bb
                    .add(q, t, None)
                    .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?
                    .is_some()
                {
                    report.belief_adds += 1;
                }
            }
            Some(Err(id)) => {
                let c = || Term::Const(Constant::Atom(id.clone()));
                for q in [
                    BeliefQuery::new("hasParcel", vec![c(), Term::Placeholder, Term::Placeholder]),
                    BeliefQuery::new("SlowDeliveryProgress", vec![c()]),
                ] {
                    report.belief_removals += bb.remove(&q).len() as u64;
                }
            }
            None => {}
        }
    }
    // Let pending timers run out one tick past the last percept.
    let out = pipeline.advance_time(last + 1000, &bb)?;
    absorb(out, &mut bb, &mut report)?;
    report.rule_errors = pipeline.take_failures().len() as u64;
    Ok(report)
}

/// `Ok(add)` for an accepted parcel, `Err(id)` for a delivered one.
fn parcel_bookkeeping(ev: &Event) -> Option<Result<BeliefQuery, String>> {
    let text = |k: &str| match ev.attributes().get(k) {
        Some(Value::Text(s)) => Some(s.clone()),
        _ => None,
    };
    let num = |k: &str| match ev.attributes().get(k) {
        Some(Value::Number(x)) => Some(*x),
        Some(Value::Integer(x)) => Some(*x as f64),
        _ => None,
    };
    match ev.event_type() {
        "ParcelAccepted" => Some(Ok(BeliefQuery::ground(
            "hasParcel",
            vec![
                Constant::Atom(text("id")?),
                Constant::Num(num("destLat")?),
                Constant::Num(num("destLon")?),
            ],
        ))),
        "ParcelDelivered" => Some(Err(text("id")?)),
        _ => None,
    }
}

fn absorb(out: Vec<PipelineOutput>, bb: &mut BeliefBase, report: &mut ReplayReport) -> Result<(), SimError> {
    for o in out {
        match &o {
            PipelineOutput::Emit { event, .. } => {
                *report.context.entry(event.event_type().to_owned()).or_default() += 1
            }
            PipelineOutput::BeliefAdd { literal, t, .. } => {
                *report.situations.entry(literal.functor.clone()).or_default() += 1;
                if bb
                    .add(literal.clone(), *t, None)
                    .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?
                    .is_some()
                {
                    report.belief_adds += 1;
                }
            }
            PipelineOutput::BeliefDel { literal, .. } => report.belief_removals += bb.remove(literal).len() as u64,
            PipelineOutput::Forward { .. } => {}
        }
        report.outputs.push(o);
    }
    Ok(())
}
