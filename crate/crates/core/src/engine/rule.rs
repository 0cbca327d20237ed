//! A rule compiled for execution: its node arena, WHERE split, and live
//! match state.

use std::sync::Arc;

use crate::belief::{BeliefBase, BeliefQuery};
use crate::epl::{Action, PatternNode, Rule, RuleKind, TemplateArg};
use crate::event::{Event, SchemaRegistry, Timestamp, Value, ValueKind};

use super::eval::{services_in, EvalValue, Partial, Scope, Services};
use super::matcher::{build, Ctx, Emission, Inst, NodeSpec};
use super::EngineError;

/// Static shape of a compiled pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutomatonSummary {
    /// One state per event atom.
    pub states: usize,
    /// Absence timers (`timer:interval(..) and not X`).
    pub timers: usize,
    pub consumed_types: Vec<String>,
}

/// What a successful firing produces.
#[derive(Debug, Clone)]
pub(crate) enum Effect {
    Forward(Arc<Event>),
    Emit(Event),
    BeliefAdd(BeliefQuery),
    BeliefDel(BeliefQuery),
}

/// Outcome of the WHERE clause for one match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Verdict {
    /// An alias-free precondition (such as a belief test) does not hold.
    Inactive,
    Pass,
    Fail,
}

#[derive(Debug)]
pub(crate) struct Logic {
    pub rule: Rule,
    pub nodes: Vec<NodeSpec>,
    pub names: Vec<String>,
    activation: Vec<crate::epl::Expr>,
    rest: Vec<crate::epl::Expr>,
    /// Slot of the alias an expectation forwards.
    pub forward_slot: Option<usize>,
    registry: Arc<SchemaRegistry>,
}

#[derive(Debug, Clone)]
enum SlotState {
    Active(Inst),
    /// Fired; waits until the added belief is gone before re-arming.
    Suspended(BeliefQuery),
}

#[derive(Debug, Clone)]
struct Slot {
    base: Partial,
    state: SlotState,
}

#[derive(Debug, Clone)]
enum RootState {
    Plain(Inst),
    /// Sequence rules that add a belief fire at most once per left match
    /// while that belief is held, then re-arm.
    Monitor {
        left: Inst,
        right_node: usize,
        slots: Vec<Slot>,
    },
}

#[derive(Debug)]
pub struct CompiledRule {
    pub(crate) logic: Logic,
    state: RootState,
    /// Evaluation errors raised by the matcher, drained by the pipeline.
    pub(crate) errors: Vec<String>,
}

/// Opaque copy of a rule's match state.
#[derive(Debug, Clone)]
pub(crate) struct Snapshot(RootState);

/// Compiles a validated rule. Fails if it calls a service that is not
/// registered.
pub fn compile(rule: &Rule, registry: Arc<SchemaRegistry>, services: &Services) -> Result<CompiledRule, EngineError> {
    let mut called = Vec::new();
    for item in &rule.select {
        services_in(&item.expr, &mut called);
    }
    if let Some(w) = &rule.where_clause {
        services_in(w, &mut called);
    }
    visit_pattern_exprs(&rule.pattern, &mut |e| services_in(e, &mut called));
    match &rule.action {
        Action::Emit { args, .. } => args.iter().for_each(|a| services_in(&a.value, &mut called)),
        Action::AddBelief(t) | Action::RemoveBelief(t) => {
            for a in &t.args {
                if let TemplateArg::Hole(e) = a {
                    services_in(e, &mut called);
                }
            }
        }
        Action::Forward(_) => {}
    }
    if let Some(s) = called.into_iter().find(|s| services.get(s).is_none()) {
        return Err(EngineError::UnknownService {
            rule: rule.name.clone(),
            service: s,
        });
    }

    let names: Vec<String> = rule.aliases().into_iter().map(str::to_owned).collect();
    let mut nodes = Vec::new();
    let root = build(&rule.pattern, &names, &mut nodes);
    let (activation, rest) = match &rule.where_clause {
        Some(w) => w.conjuncts().into_iter().cloned().partition(|c| c.aliases().is_empty()),
        None => (Vec::new(), Vec::new()),
    };
    let forward_slot = match &rule.action {
        Action::Forward(a) => names.iter().position(|n| n == a),
        _ => None,
    };
    let monitor = match (&rule.action, &nodes[root]) {
        (Action::AddBelief(_), NodeSpec::Seq(l, r)) => Some((*l, *r)),
        _ => None,
    };
    let logic = Logic {
        rule: rule.clone(),
        nodes,
        names,
        activation,
        rest,
        forward_slot,
        registry,
    };
    let mut errors = Vec::new();
    let bb = BeliefBase::new();
    let mut ctx = Ctx {
        nodes: &logic.nodes,
        names: &logic.names,
        bb: &bb,
        services,
        errors: &mut errors,
    };
    let base = Partial::new(logic.names.len());
    let state = match monitor {
        Some((l, r)) => RootState::Monitor {
            left: Inst::spawn(l, base, 0, &mut ctx),
            right_node: r,
            slots: Vec::new(),
        },
        None => RootState::Plain(Inst::spawn(root, base, 0, &mut ctx)),
    };
    Ok(CompiledRule { logic, state, errors })
}

fn visit_pattern_exprs(p: &PatternNode, f: &mut impl FnMut(&crate::epl::Expr)) {
    match p {
        PatternNode::Atom(a) => {
            if let Some(e) = &a.filter {
                f(e)
            }
        }
        PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
            visit_pattern_exprs(l, f);
            visit_pattern_exprs(r, f);
        }
        PatternNode::NotWithin { duration, .. } => f(duration),
        PatternNode::TimeWindow { child, duration } | PatternNode::BatchWindow { child, duration } => {
            f(duration);
            visit_pattern_exprs(child, f);
        }
    }
}

impl CompiledRule {
    pub fn name(&self) -> &str {
        &self.logic.rule.name
    }

    pub fn rule(&self) -> &Rule {
        &self.logic.rule
    }

    pub fn kind(&self) -> RuleKind {
        self.logic.rule.kind
    }

    pub fn summary(&self) -> AutomatonSummary {
        let timers = self
            .logic
            .nodes
            .iter()
            .filter(|n| matches!(n, NodeSpec::NotWithin { .. }))
            .count();
        AutomatonSummary {
            states: self.logic.rule.pattern.atoms().len(),
            timers,
            consumed_types: self
                .logic
                .rule
                .consumed_types()
                .into_iter()
                .map(str::to_owned)
                .collect(),
        }
    }

    pub(crate) fn consumes(&self, event_type: &str) -> bool {
        self.logic.rule.consumed_types().contains(&event_type)
    }

    pub(crate) fn snapshot(&self) -> Snapshot {
        Snapshot(self.state.clone())
    }

    pub(crate) fn restore(&mut self, s: Snapshot) {
        self.state = s.0;
    }

    /// Start times of all live partial matches.
    pub fn partial_starts(&self) -> Vec<Timestamp> {
        let mut out = Vec::new();
        match &self.state {
            RootState::Plain(i) => i.partial_starts(&mut out),
            RootState::Monitor { left, slots, .. } => {
                left.partial_starts(&mut out);
                out.extend(slots.iter().filter_map(|s| s.base.start));
            }
        }
        out
    }

    pub(crate) fn next_deadline(&self) -> Option<Timestamp> {
        let nodes = &self.logic.nodes;
        match &self.state {
            RootState::Plain(i) => i.next_deadline(nodes),
            RootState::Monitor { left, slots, .. } => slots
                .iter()
                .filter_map(|s| match &s.state {
                    SlotState::Active(i) => i.next_deadline(nodes),
                    SlotState::Suspended(_) => None,
                })
                .chain(left.next_deadline(nodes))
                .min(),
        }
    }

    /// Re-arms monitor slots whose belief has been retracted.
    pub(crate) fn poll(&mut self, now: Timestamp, bb: &BeliefBase, services: &Services) {
        let RootState::Monitor { right_node, slots, .. } = &mut self.state else {
            return;
        };
        let mut ctx = Ctx {
            nodes: &self.logic.nodes,
            names: &self.logic.names,
            bb,
            services,
            errors: &mut self.errors,
        };
        for s in slots.iter_mut() {
            if let SlotState::Suspended(q) = &s.state {
                if !bb.contains(q) {
                    s.state = SlotState::Active(Inst::spawn(*right_node, s.base.clone(), now, &mut ctx));
                }
            }
        }
    }

    /// Raw emissions for `ev`, without evaluating WHERE. Used to judge
    /// expectations.
    pub(crate) fn feed_raw(&mut self, ev: &Arc<Event>, bb: &BeliefBase, services: &Services) -> Vec<Emission> {
        let mut ctx = Ctx {
            nodes: &self.logic.nodes,
            names: &self.logic.names,
            bb,
            services,
            errors: &mut self.errors,
        };
        match &mut self.state {
            RootState::Plain(i) => i.feed(ev, &mut ctx),
            RootState::Monitor { .. } => unreachable!("expectations forward, they never add beliefs"),
        }
    }

    /// Feeds an event and returns the effects of all firings.
    pub(crate) fn feed(
        &mut self,
        ev: &Arc<Event>,
        bb: &BeliefBase,
        services: &Services,
    ) -> Vec<(Timestamp, Result<Effect, String>)> {
        self.step(Drive::Feed(ev), bb, services)
    }

    /// Moves time to `to` and returns the effects of all firings.
    pub(crate) fn advance(
        &mut self,
        to: Timestamp,
        bb: &BeliefBase,
        services: &Services,
    ) -> Vec<(Timestamp, Result<Effect, String>)> {
        self.step(Drive::Advance(to), bb, services)
    }

    fn step(&mut self, drive: Drive, bb: &BeliefBase, services: &Services) -> Vec<(Timestamp, Result<Effect, String>)> {
        let logic = &self.logic;
        let mut ctx = Ctx {
            nodes: &logic.nodes,
            names: &logic.names,
            bb,
            services,
            errors: &mut self.errors,
        };
        let mut out = Vec::new();
        match &mut self.state {
            RootState::Plain(inst) => {
                for em in drive.run(inst, &mut ctx) {
                    match logic.judge(&em.partial, bb, services) {
                        Ok(Verdict::Pass) => out.push((em.ts, logic.fire(&em.partial, em.ts, bb, services))),
                        Ok(_) => {}
                        Err(m) => out.push((em.ts, Err(m))),
                    }
                }
            }
            RootState::Monitor {
                left,
                right_node,
                slots,
            } => {
                let right_node = *right_node;
                slots.retain_mut(|s| {
                    let SlotState::Active(inst) = &mut s.state else {
                        return true;
                    };
                    let ems = drive.run(inst, &mut ctx);
                    let dead = inst.is_dead();
                    let mut next = None;
                    for em in ems {
                        match logic.judge(&em.partial, bb, services) {
                            Ok(Verdict::Pass) => {
                                let fired = logic.fire(&em.partial, em.ts, bb, services);
                                let suspend = match &fired {
                                    Ok(Effect::BeliefAdd(q)) => Some(SlotState::Suspended(q.clone())),
                                    _ => None,
                                };
                                out.push((em.ts, fired));
                                if suspend.is_some() {
                                    next = suspend;
                                    break;
                                }
                            }
                            Ok(_) => {
                                let mut again = Inst::spawn(right_node, s.base.clone(), em.ts, &mut ctx);
                                if let Drive::Advance(to) = drive {
                                    out_of_band(&mut again, to, &mut ctx);
                                }
                                next = Some(SlotState::Active(again));
                            }
                            Err(m) => out.push((em.ts, Err(m))),
                        }
                    }
                    match next {
                        Some(n) => {
                            s.state = n;
                            true
                        }
                        // The right side finished without a match.
                        None => !dead,
                    }
                });
                for em in drive.run(left, &mut ctx) {
                    let mut inst = Inst::spawn(right_node, em.partial.clone(), em.ts, &mut ctx);
                    if let Drive::Advance(to) = drive {
                        out_of_band(&mut inst, to, &mut ctx);
                    }
                    if !inst.is_dead() {
                        slots.push(Slot {
                            base: em.partial,
                            state: SlotState::Active(inst),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Advances a freshly spawned right side. Anything it emits would predate
/// the spawning match's own firing and is dropped.
fn out_of_band(inst: &mut Inst, to: Timestamp, ctx: &mut Ctx) {
    let _ = inst.advance(to, ctx);
}

#[derive(Clone, Copy)]
enum Drive<'e> {
    Feed(&'e Arc<Event>),
    Advance(Timestamp),
}

impl Drive<'_> {
    fn run(self, inst: &mut Inst, ctx: &mut Ctx) -> Vec<Emission> {
        match self {
            Drive::Feed(ev) => inst.feed(ev, ctx),
            Drive::Advance(to) => inst.advance(to, ctx),
        }
    }
}

impl Logic {
    fn scope<'a>(
        &'a self,
        partial: &'a Partial,
        outputs: &'a [(String, EvalValue)],
        bb: &'a BeliefBase,
        services: &'a Services,
    ) -> Scope<'a> {
        Scope {
            names: &self.names,
            partial,
            outputs,
            bb,
            services,
        }
    }

    /// Evaluates WHERE. Conjuncts that mention aliases the match left
    /// unbound (the other arm of an `or`) hold vacuously.
    pub fn judge(&self, partial: &Partial, bb: &BeliefBase, services: &Services) -> Result<Verdict, String> {
        let scope = self.scope(partial, &[], bb, services);
        for c in &self.activation {
            if !scope.truthy(c)? {
                return Ok(Verdict::Inactive);
            }
        }
        for c in &self.rest {
            if scope.covers(c) && !scope.truthy(c)? {
                return Ok(Verdict::Fail);
            }
        }
        Ok(Verdict::Pass)
    }

    pub fn fire(
        &self,
        partial: &Partial,
        t: Timestamp,
        bb: &BeliefBase,
        services: &Services,
    ) -> Result<Effect, String> {
        let mut outputs: Vec<(String, EvalValue)> = Vec::new();
        for item in &self.rule.select {
            let v = self.scope(partial, &outputs, bb, services).eval(&item.expr)?;
            outputs.push((item.alias.clone(), v));
        }
        let scope = self.scope(partial, &outputs, bb, services);
        match &self.rule.action {
            Action::Forward(alias) => {
                let slot = self.forward_slot.expect("forward alias is bound");
                partial.slots[slot]
                    .clone()
                    .map(Effect::Forward)
                    .ok_or_else(|| format!("alias `{alias}` is not bound in this match"))
            }
            Action::AddBelief(t) => Ok(Effect::BeliefAdd(scope.instantiate(t)?)),
            Action::RemoveBelief(t) => Ok(Effect::BeliefDel(scope.instantiate(t)?)),
            Action::Emit { event_type, args } => {
                let schema = self
                    .registry
                    .schema(event_type)
                    .ok_or_else(|| format!("unknown event type `{event_type}`"))?;
                let mut given: Vec<(String, EvalValue)> = Vec::new();
                for (i, a) in args.iter().enumerate() {
                    let name = match &a.name {
                        Some(n) => n.clone(),
                        None => schema
                            .attributes
                            .get(i)
                            .map(|(n, _)| n.clone())
                            .ok_or_else(|| format!("too many arguments for {event_type}"))?,
                    };
                    given.push((name, scope.eval(&a.value)?));
                }
                // Attributes not given explicitly are taken by name from the
                // select outputs, then from the most recently bound event.
                for (name, _) in &schema.attributes {
                    if given.iter().any(|(n, _)| n == name) {
                        continue;
                    }
                    if let Some((_, v)) = outputs.iter().find(|(n, _)| n == name) {
                        given.push((name.clone(), v.clone()));
                        continue;
                    }
                    let latest = partial
                        .slots
                        .iter()
                        .flatten()
                        .filter_map(|e| e.get(name).map(|v| (e.timestamp(), v)))
                        .max_by_key(|(t, _)| *t);
                    if let Some((_, v)) = latest {
                        given.push((name.clone(), EvalValue::from(v)));
                    }
                }
                let mut attrs = Vec::with_capacity(given.len());
                for (name, v) in given {
                    let kind = schema.attribute(&name);
                    attrs.push((name, to_value(v, kind)?));
                }
                self.registry
                    .make_event(event_type, t, attrs)
                    .map(Effect::Emit)
                    .map_err(|e| e.to_string())
            }
        }
    }
}

fn to_value(v: EvalValue, kind: Option<ValueKind>) -> Result<Value, String> {
    Ok(match v {
        EvalValue::Num(x) if kind == Some(ValueKind::Integer) && x.fract() == 0.0 => Value::Integer(x as i64),
        EvalValue::Num(x) => Value::Number(x),
        EvalValue::Text(s) => Value::Text(s),
        EvalValue::Bool(b) => Value::Boolean(b),
        EvalValue::Geo(g) => Value::Geo(g),
        EvalValue::Event(e) => match kind {
            Some(ValueKind::Text) => match EvalValue::Event(e).to_constant()? {
                crate::belief::Constant::Atom(s) => Value::Text(s),
                crate::belief::Constant::Num(x) => Value::Text(x.to_string()),
            },
            Some(ValueKind::Geo) => Value::Geo(
                e.position()
                    .ok_or_else(|| format!("{} event has no location", e.event_type()))?,
            ),
            _ => return Err(format!("cannot store a {} event as an attribute", e.event_type())),
        },
    })
}
