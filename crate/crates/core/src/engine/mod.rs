//! Perception pipeline: expectation rules filter percepts, interpretation
//! rules derive context events, situations and belief changes from them.

mod eval;
mod matcher;
mod rule;

use std::collections::VecDeque;
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::belief::{BeliefBase, BeliefQuery};
use crate::epl::{validate_ruleset, DependencyReport, EplError, Rule, RuleKind};
use crate::event::{Event, SchemaRegistry, Timestamp};

pub use eval::{evaluate_aggregate, EvalValue, ServiceFn, Services};
pub use rule::{compile, AutomatonSummary, CompiledRule};

use rule::{Effect, Verdict};

/// Emitted events may trigger further rules; chains longer than this are
/// treated as a runaway.
pub const MAX_INJECTION_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("rule `{rule}` calls unknown service `{service}`")]
    UnknownService { rule: String, service: String },
    #[error("event at {got} arrived after time {last}")]
    OutOfOrderEvent { last: Timestamp, got: Timestamp },
    #[error("emitting {event_type} exceeded injection depth {depth}")]
    InjectionDepthExceeded { depth: usize, event_type: String },
    #[error("aggregate over an empty window")]
    EmptyWindow,
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Ruleset(#[from] EplError),
}

/// A rule whose firing was aborted by an evaluation error.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleFailure {
    pub t: Timestamp,
    pub rule: String,
    pub message: String,
}

/// Something the pipeline hands to the agent.
#[derive(Debug, Clone, PartialEq)]
pub enum PipelineOutput {
    /// A percept that passed the expectations. `judged` is false when no
    /// expectation had an opinion on it.
    Forward {
        rule: String,
        event: Event,
        judged: bool,
    },
    Emit {
        rule: String,
        event: Event,
    },
    BeliefAdd {
        rule: String,
        literal: BeliefQuery,
        t: Timestamp,
    },
    BeliefDel {
        rule: String,
        literal: BeliefQuery,
        t: Timestamp,
    },
}

impl PipelineOutput {
    pub fn rule(&self) -> &str {
        match self {
            PipelineOutput::Forward { rule, .. }
            | PipelineOutput::Emit { rule, .. }
            | PipelineOutput::BeliefAdd { rule, .. }
            | PipelineOutput::BeliefDel { rule, .. } => rule,
        }
    }

    pub fn time(&self) -> Timestamp {
        match self {
            PipelineOutput::Forward { event, .. } | PipelineOutput::Emit { event, .. } => event.timestamp(),
            PipelineOutput::BeliefAdd { t, .. } | PipelineOutput::BeliefDel { t, .. } => *t,
        }
    }

    /// The event carried by forward and emit outputs.
    pub fn event(&self) -> Option<&Event> {
        match self {
            PipelineOutput::Forward { event, .. } | PipelineOutput::Emit { event, .. } => Some(event),
            _ => None,
        }
    }

    /// One JSON-lines record.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, payload) = match self {
            PipelineOutput::Forward { event, .. } => ("forward", event.to_json()),
            PipelineOutput::Emit { event, .. } => ("emit", event.to_json()),
            PipelineOutput::BeliefAdd { literal, .. } => ("belief_add", json!(literal.to_string())),
            PipelineOutput::BeliefDel { literal, .. } => ("belief_del", json!(literal.to_string())),
        };
        let mut v = json!({"t": self.time(), "rule": self.rule(), "kind": kind, "payload": payload});
        if let PipelineOutput::Forward { judged, .. } = self {
            v["judged"] = json!(judged);
        }
        v
    }
}

/// Derives an internal event from a percept, e.g. a user location from a
/// GPS fix. Projected events feed rules but are not outputs.
pub type Projection = fn(&Event, &SchemaRegistry) -> Option<Event>;

pub struct PerceptionPipeline {
    registry: Arc<SchemaRegistry>,
    services: Services,
    rules: Vec<CompiledRule>,
    report: DependencyReport,
    projections: Vec<(String, Projection)>,
    watermark: Option<Timestamp>,
    failures: Vec<RuleFailure>,
}

impl std::fmt::Debug for PerceptionPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerceptionPipeline")
            .field("rules", &self.rules.iter().map(|r| r.name()).collect::<Vec<_>>())
            .field("watermark", &self.watermark)
            .finish()
    }
}

impl PerceptionPipeline {
    /// Validates the rule set and compiles every rule.
    pub fn new(rules: Vec<Rule>, registry: Arc<SchemaRegistry>, services: Services) -> Result<Self, EngineError> {
        let report = validate_ruleset(&rules, &registry)?;
        let compiled = rules
            .iter()
            .map(|r| compile(r, registry.clone(), &services))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            registry,
            services,
            rules: compiled,
            report,
            projections: Vec::new(),
            watermark: None,
            failures: Vec::new(),
        })
    }

    pub fn add_projection(&mut self, from_type: &str, f: Projection) {
        self.projections.push((from_type.to_owned(), f));
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    pub fn dependency_report(&self) -> &DependencyReport {
        &self.report
    }

    pub fn rules(&self) -> &[CompiledRule] {
        &self.rules
    }

    pub fn rule(&self, name: &str) -> Option<&CompiledRule> {
        self.rules.iter().find(|r| r.name() == name)
    }

    /// Latest time the pipeline has seen.
    pub fn watermark(&self) -> Option<Timestamp> {
        self.watermark
    }

    /// Evaluation errors since the last call.
    pub fn take_failures(&mut self) -> Vec<RuleFailure> {
        std::mem::take(&mut self.failures)
    }

    /// Processes one percept. Timers due at or before its timestamp fire
    /// first. Belief changes are reported, not applied.
    pub fn ingest(&mut self, ev: Event, bb: &BeliefBase) -> Result<Vec<PipelineOutput>, EngineError> {
        let t = ev.timestamp();
        if let Some(last) = self.watermark {
            if t < last {
                return Err(EngineError::OutOfOrderEvent { last, got: t });
            }
        }
        let mut out = self.advance_time(t, bb)?;
        let ev = Arc::new(ev);
        let guarded = self.report.guarded_types.iter().any(|g| g == ev.event_type());
        if guarded {
            if let Some(fwd) = self.judge(&ev, bb) {
                out.push(fwd);
                self.interpret(ev, bb, &mut out)?;
            }
        } else {
            for i in 0..self.rules.len() {
                if self.rules[i].kind() == RuleKind::Expectation && self.rules[i].consumes(ev.event_type()) {
                    let _ = self.rules[i].feed_raw(&ev, bb, &self.services);
                    self.drain_errors(i, t);
                }
            }
            self.interpret(ev, bb, &mut out)?;
        }
        Ok(out)
    }

    /// Fires every timer due at or before `to`, in time order. Calling it
    /// again with the same or an earlier time does nothing.
    pub fn advance_time(&mut self, to: Timestamp, bb: &BeliefBase) -> Result<Vec<PipelineOutput>, EngineError> {
        let mut out = Vec::new();
        if self.watermark.is_some_and(|w| to < w) {
            return Ok(out);
        }
        let now = self.watermark.unwrap_or(to);
        for r in &mut self.rules {
            r.poll(now, bb, &self.services);
        }
        let mut last = None;
        loop {
            let due = self
                .rules
                .iter()
                .filter_map(|r| r.next_deadline())
                .filter(|d| *d <= to)
                .min();
            let Some(t) = due else { break };
            if last == Some(t) {
                // Nothing moved at this instant; avoid spinning.
                break;
            }
            last = Some(t);
            self.watermark = Some(t);
            self.step_rules(t, bb, &mut out)?;
        }
        self.watermark = Some(to);
        self.step_rules(to, bb, &mut out)?;
        Ok(out)
    }

    fn step_rules(&mut self, t: Timestamp, bb: &BeliefBase, out: &mut Vec<PipelineOutput>) -> Result<(), EngineError> {
        let mut injected = Vec::new();
        for i in 0..self.rules.len() {
            let effects = self.rules[i].advance(t, bb, &self.services);
            if self.rules[i].kind() == RuleKind::Interpretation {
                self.apply(i, effects, 0, out, &mut injected);
            }
            self.drain_errors(i, t);
        }
        self.run_queue(injected.into(), bb, out)
    }

    /// Decides whether a guarded percept reaches interpretation. Any
    /// expectation that forwards it wins; otherwise a rejection drops it and
    /// rolls every expectation back, so the dropped fix anchors nothing.
    fn judge(&mut self, ev: &Arc<Event>, bb: &BeliefBase) -> Option<PipelineOutput> {
        let t = ev.timestamp();
        let mut snapshots = Vec::new();
        let mut forwarded_by = None;
        let mut rejected = false;
        let mut first_guard = None;
        for i in 0..self.rules.len() {
            let r = &self.rules[i];
            if r.kind() != RuleKind::Expectation || !r.consumes(ev.event_type()) {
                continue;
            }
            first_guard.get_or_insert(i);
            snapshots.push((i, r.snapshot()));
            let ems = self.rules[i].feed_raw(ev, bb, &self.services);
            let mut errors = Vec::new();
            let logic = &self.rules[i].logic;
            for em in ems {
                let binds = logic
                    .forward_slot
                    .and_then(|s| em.partial.slots[s].as_ref())
                    .is_some_and(|b| Arc::ptr_eq(b, ev));
                if !binds {
                    continue;
                }
                match logic.judge(&em.partial, bb, &self.services) {
                    Ok(Verdict::Pass) => {
                        forwarded_by.get_or_insert(i);
                    }
                    Ok(Verdict::Fail) => rejected = true,
                    Ok(Verdict::Inactive) => {}
                    Err(m) => errors.push(m),
                }
            }
            self.rules[i].errors.extend(errors);
            self.drain_errors(i, t);
        }
        match (forwarded_by, rejected) {
            (Some(i), _) => Some(PipelineOutput::Forward {
                rule: self.rules[i].name().to_owned(),
                event: (**ev).clone(),
                judged: true,
            }),
            (None, true) => {
                for (i, s) in snapshots {
                    self.rules[i].restore(s);
                }
                None
            }
            (None, false) => Some(PipelineOutput::Forward {
                rule: first_guard.map_or_else(String::new, |i| self.rules[i].name().to_owned()),
                event: (**ev).clone(),
                judged: false,
            }),
        }
    }

    fn interpret(&mut self, ev: Arc<Event>, bb: &BeliefBase, out: &mut Vec<PipelineOutput>) -> Result<(), EngineError> {
        self.run_queue(VecDeque::from([(ev, 0)]), bb, out)
    }

    fn run_queue(
        &mut self,
        mut queue: VecDeque<(Arc<Event>, usize)>,
        bb: &BeliefBase,
        out: &mut Vec<PipelineOutput>,
    ) -> Result<(), EngineError> {
        while let Some((ev, depth)) = queue.pop_front() {
            if depth > MAX_INJECTION_DEPTH {
                return Err(EngineError::InjectionDepthExceeded {
                    depth,
                    event_type: ev.event_type().to_owned(),
                });
            }
            for (from, f) in &self.projections {
                if from == ev.event_type() {
                    if let Some(p) = f(&ev, &self.registry) {
                        queue.push_back((Arc::new(p), depth));
                    }
                }
            }
            let mut injected = Vec::new();
            for i in 0..self.rules.len() {
                let r = &self.rules[i];
                if r.kind() != RuleKind::Interpretation || !r.consumes(ev.event_type()) {
                    continue;
                }
                let effects = self.rules[i].feed(&ev, bb, &self.services);
                self.apply(i, effects, depth, out, &mut injected);
                self.drain_errors(i, ev.timestamp());
            }
            queue.extend(injected);
        }
        Ok(())
    }

    fn apply(
        &mut self,
        i: usize,
        effects: Vec<(Timestamp, Result<Effect, String>)>,
        depth: usize,
        out: &mut Vec<PipelineOutput>,
        injected: &mut Vec<(Arc<Event>, usize)>,
    ) {
        let rule = self.rules[i].name().to_owned();
        for (t, effect) in effects {
            match effect {
                Ok(Effect::Emit(event)) => {
                    injected.push((Arc::new(event.clone()), depth + 1));
                    out.push(PipelineOutput::Emit {
                        rule: rule.clone(),
                        event,
                    });
                }
                Ok(Effect::Forward(event)) => out.push(PipelineOutput::Forward {
                    rule: rule.clone(),
                    event: (*event).clone(),
                    judged: true,
                }),
                Ok(Effect::BeliefAdd(literal)) => out.push(PipelineOutput::BeliefAdd {
                    rule: rule.clone(),
                    literal,
                    t,
                }),
                Ok(Effect::BeliefDel(literal)) => out.push(PipelineOutput::BeliefDel {
                    rule: rule.clone(),
                    literal,
                    t,
                }),
                Err(message) => self.failures.push(RuleFailure {
                    t,
                    rule: rule.clone(),
                    message,
                }),
            }
        }
    }

    fn drain_errors(&mut self, i: usize, t: Timestamp) {
        let errors = std::mem::take(&mut self.rules[i].errors);
        let rule = self.rules[i].name();
        self.failures.extend(errors.into_iter().map(|message| RuleFailure {
            t,
            rule: rule.to_owned(),
            message,
        }));
    }
}
