//! Belief/plan agents around a perception pipeline: each cycle expires
//! beliefs, pushes inbox messages and percepts through the pipeline, applies
//! the resulting belief changes and runs the first applicable plan for every
//! change.

use std::collections::{BTreeMap, VecDeque};

use serde_json::json;
use thiserror::Error;

use crate::belief::{BeliefBase, BeliefChange, BeliefQuery, Bindings, Constant, Term};
use crate::engine::{EngineError, PerceptionPipeline, PipelineOutput};
use crate::event::{Event, GeoPoint, Timestamp};
use crate::geo;

/// Cap on plan-generated notifications per cycle.
const MAX_NOTIFICATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("tick {tick} is not after the previous tick {previous}")]
    NonMonotonicTick { previous: Timestamp, tick: Timestamp },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A goal instance, e.g. `sellParcel(p1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub name: String,
    pub args: Vec<Constant>,
}

impl std::fmt::Display for Goal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let args: Vec<String> = self.args.iter().map(|a| a.to_string()).collect();
        write!(f, "!{}({})", self.name, args.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Trigger {
    BeliefAdded(BeliefQuery),
    BeliefRemoved(BeliefQuery),
    GoalAdopted { name: String, args: Vec<Term> },
}

/// Something that happened to the agent and may trigger a plan.
#[derive(Debug, Clone, PartialEq)]
pub enum Notification {
    Belief(BeliefChange),
    Goal(Goal),
}

impl std::fmt::Display for Notification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Notification::Belief(c) => c.fmt(f),
            Notification::Goal(g) => write!(f, "+{g}"),
        }
    }
}

impl Trigger {
    fn unify(&self, n: &Notification) -> Option<Bindings> {
        match (self, n) {
            (Trigger::BeliefAdded(q), Notification::Belief(BeliefChange::Added(b)))
            | (Trigger::BeliefRemoved(q), Notification::Belief(BeliefChange::Removed(b))) => {
                q.unify(b, &Bindings::new())
            }
            (Trigger::GoalAdopted { name, args }, Notification::Goal(g)) => {
                if *name != g.name || args.len() != g.args.len() {
                    return None;
                }
                let q = BeliefQuery::new(name, args.clone());
                let b = crate::belief::Belief {
                    functor: g.name.clone(),
                    args: g.args.clone(),
                    added_at: 0,
                    expires_at: None,
                };
                q.unify(&b, &Bindings::new())
            }
            _ => None,
        }
    }
}

/// Who receives a message.
#[derive(Debug, Clone, PartialEq)]
pub enum Recipient {
    Agent(String),
    /// Every other agent currently within this many meters of the sender.
    BroadcastWithin(f64),
}

/// A message waiting to be delivered.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Recipient,
    pub payload: Event,
}

/// A delivered message.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: String,
    pub recipient: String,
    pub payload: Event,
    pub sent_at: Timestamp,
    /// Earliest tick at which the recipient sees it.
    pub available_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextCond {
    /// Must have a solution in the belief base; extends the bindings.
    Holds(BeliefQuery),
    /// Must have no solution.
    Absent(BeliefQuery),
    /// Named domain test.
    Check(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanStep {
    Send {
        to: Recipient,
        payload: Event,
    },
    ArtifactOp {
        artifact: String,
        op: String,
        args: Vec<Term>,
    },
    AddBelief(BeliefQuery),
    RemoveBelief(BeliefQuery),
    AdoptGoal {
        name: String,
        args: Vec<Term>,
    },
    /// Named domain strategy, e.g. computing a bid.
    Custom(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub name: String,
    pub trigger: Trigger,
    pub context: Vec<ContextCond>,
    pub body: Vec<PlanStep>,
}

/// One agent log record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub t: Timestamp,
    pub agent: String,
    /// `plan_fired`, `msg_out`, `msg_in`, `belief`, `goal` or `error`.
    pub kind: &'static str,
    pub detail: serde_json::Value,
}

impl LogEntry {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = match &self.detail {
            serde_json::Value::Object(m) => serde_json::Value::Object(m.clone()),
            _ => json!({}),
        };
        v["t"] = json!(self.t);
        v["agent"] = json!(self.agent);
        v["kind"] = json!(self.kind);
        v
    }
}

/// Mutable view of an agent handed to domain hooks.
pub struct Cx<'a, D> {
    pub id: &'a str,
    pub now: Timestamp,
    pub position: Option<GeoPoint>,
    pub beliefs: &'a mut BeliefBase,
    pub goals: &'a mut Vec<Goal>,
    pub domain: &'a mut D,
    outbox: &'a mut Vec<Outbound>,
    notes: &'a mut VecDeque<Notification>,
    log: &'a mut Vec<LogEntry>,
}

impl<D> Cx<'_, D> {
    pub fn send(&mut self, to: Recipient, payload: Event) {
        let to_json = match &to {
            Recipient::Agent(a) => json!(a),
            Recipient::BroadcastWithin(r) => json!({"within_m": r}),
        };
        self.log("msg_out", json!({"to": to_json, "payload": payload.to_json()}));
        self.outbox.push(Outbound { to, payload });
    }

    pub fn add_belief(&mut self, q: BeliefQuery, expires_at: Option<Timestamp>) -> Result<(), String> {
        let change = self.beliefs.add(q, self.now, expires_at).map_err(|e| e.to_string())?;
        if let Some(c) = change {
            self.log("belief", json!({"change": c.to_string()}));
            self.notes.push_back(Notification::Belief(c));
        }
        Ok(())
    }

    pub fn remove_belief(&mut self, q: &BeliefQuery) {
        for c in self.beliefs.remove(q) {
            self.log("belief", json!({"change": c.to_string()}));
            self.notes.push_back(Notification::Belief(c));
        }
    }

    /// Adopts a goal unless it is already held.
    pub fn adopt_goal(&mut self, name: &str, args: Vec<Constant>) {
        let g = Goal {
            name: name.to_owned(),
            args,
        };
        if self.goals.contains(&g) {
            return;
        }
        self.log("goal", json!({"adopted": g.to_string()}));
        self.goals.push(g.clone());
        self.notes.push_back(Notification::Goal(g));
    }

    pub fn drop_goal(&mut self, name: &str, args: &[Constant]) {
        let before = self.goals.len();
        self.goals.retain(|g| !(g.name == name && g.args == args));
        if self.goals.len() < before {
            let g = Goal {
                name: name.to_owned(),
                args: args.to_vec(),
            };
            self.log("goal", json!({"dropped": g.to_string()}));
        }
    }

    pub fn log(&mut self, kind: &'static str, detail: serde_json::Value) {
        self.log.push(LogEntry {
            t: self.now,
            agent: self.id.to_owned(),
            kind,
            detail,
        });
    }
}

/// Domain step: runs with the plan's bindings.
pub type Hook<D> = fn(&mut Cx<D>, &Bindings) -> Result<(), String>;
/// Domain context test.
pub type Check<D> = fn(&mut Cx<D>, &Bindings) -> bool;
/// Reacts to an event the agent observes (a message, a domain percept, or
/// a derived context event). Never registered for raw sensor types.
pub type Observer<D> = fn(&mut Cx<D>, &Event) -> Result<(), String>;
/// Artifact operation.
pub type ArtifactFn<D> = fn(&mut Cx<D>, &str, &[Constant]) -> Result<(), String>;

pub struct Agent<D> {
    pub id: String,
    pub beliefs: BeliefBase,
    pub goals: Vec<Goal>,
    pub domain: D,
    pipeline: PerceptionPipeline,
    plans: Vec<Plan>,
    hooks: BTreeMap<String, Hook<D>>,
    checks: BTreeMap<String, Check<D>>,
    observers: BTreeMap<String, Observer<D>>,
    artifacts: BTreeMap<String, ArtifactFn<D>>,
    inbox: Vec<Message>,
    last_tick: Option<Timestamp>,
    position: Option<GeoPoint>,
    /// Event type whose forwarded instances move the agent.
    position_type: String,
}

/// Result of one cycle.
#[derive(Debug, Default)]
pub struct StepOutput {
    pub messages: Vec<Outbound>,
    pub log: Vec<LogEntry>,
    pub pipeline: Vec<PipelineOutput>,
}

impl<D> Agent<D> {
    pub fn new(id: &str, pipeline: PerceptionPipeline, domain: D) -> Self {
        Self {
            id: id.to_owned(),
            beliefs: BeliefBase::new(),
            goals: Vec::new(),
            domain,
            pipeline,
            plans: Vec::new(),
            hooks: BTreeMap::new(),
            checks: BTreeMap::new(),
            observers: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            inbox: Vec::new(),
            last_tick: None,
            position: None,
            position_type: "Gps".to_owned(),
        }
    }

    pub fn add_plan(&mut self, plan: Plan) {
        self.plans.push(plan);
    }

    pub fn plans(&self) -> &[Plan] {
        &self.plans
    }

    pub fn add_hook(&mut self, name: &str, f: Hook<D>) {
        self.hooks.insert(name.to_owned(), f);
    }

    pub fn add_check(&mut self, name: &str, f: Check<D>) {
        self.checks.insert(name.to_owned(), f);
    }

    pub fn observe(&mut self, event_type: &str, f: Observer<D>) {
        self.observers.insert(event_type.to_owned(), f);
    }

    pub fn add_artifact(&mut self, name: &str, f: ArtifactFn<D>) {
        self.artifacts.insert(name.to_owned(), f);
    }

    pub fn pipeline(&self) -> &PerceptionPipeline {
        &self.pipeline
    }

    /// Last forwarded position fix.
    pub fn position(&self) -> Option<GeoPoint> {
        self.position
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    /// Messages received but not yet consumed.
    pub fn inbox(&self) -> &[Message] {
        &self.inbox
    }

    pub fn receive(&mut self, m: Message) {
        self.inbox.push(m);
    }

    /// Adopts a goal outside a cycle and runs the plans it triggers.
    pub fn adopt_goal(&mut self, name: &str, args: Vec<Constant>, now: Timestamp) -> StepOutput {
        let mut out = StepOutput::default();
        let mut notes = VecDeque::new();
        {
            let mut cx = self.cx(now, &mut out, &mut notes);
            cx.adopt_goal(name, args);
        }
        self.deliberate(now, notes, &mut out);
        out
    }

    fn cx<'a>(
        &'a mut self,
        now: Timestamp,
        out: &'a mut StepOutput,
        notes: &'a mut VecDeque<Notification>,
    ) -> Cx<'a, D> {
        Cx {
            id: &self.id,
            now,
            position: self.position,
            beliefs: &mut self.beliefs,
            goals: &mut self.goals,
            domain: &mut self.domain,
            outbox: &mut out.messages,
            notes,
            log: &mut out.log,
        }
    }

    /// One perceive-deliberate-act cycle at `tick`.
    pub fn step(&mut self, tick: Timestamp, mut percepts: Vec<Event>) -> Result<StepOutput, AgentError> {
        if let Some(previous) = self.last_tick {
            if tick <= previous {
                return Err(AgentError::NonMonotonicTick { previous, tick });
            }
        }
        self.last_tick = Some(tick);
        let mut out = StepOutput::default();
        let mut notes = VecDeque::new();

        for c in self.beliefs.expire(tick) {
            out.log
                .push(self.entry(tick, "belief", json!({"change": c.to_string()})));
            notes.push_back(Notification::Belief(c));
        }

        // Visible inbox messages first, in timestamp-then-sender order, then
        // percepts in timestamp order.
        let (ready, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.inbox)
            .into_iter()
            .partition(|m| m.available_at <= tick);
        self.inbox = later;
        let mut ready = ready;
        ready.sort_by(|a, b| (a.sent_at, &a.sender).cmp(&(b.sent_at, &b.sender)));
        percepts.sort_by_key(|e| e.timestamp());
        let floor = self.pipeline.watermark().unwrap_or(0);
        let mut items: Vec<(Event, Option<&str>)> = Vec::new();
        let mut messages = Vec::new();
        for m in &ready {
            // Messages become visible now; their payload takes the current
            // time so the pipeline sees it in order.
            let at = m.available_at.max(floor).min(tick);
            messages.push((m.payload.restamped(at), m.sender.clone()));
        }
        for (ev, sender) in &messages {
            items.push((ev.clone(), Some(sender.as_str())));
        }
        for p in percepts {
            items.push((p, None));
        }
        items.sort_by_key(|(e, _)| e.timestamp());

        for (ev, sender) in items {
            if let Some(s) = sender {
                out.log
                    .push(self.entry(tick, "msg_in", json!({"from": s, "payload": ev.to_json()})));
            }
            let outputs = self.pipeline.ingest(ev.clone(), &self.beliefs)?;
            self.absorb(tick, outputs, &mut out, &mut notes);
            if ev.event_type() != self.position_type {
                self.notify_observer(tick, &ev, &mut out, &mut notes);
            }
        }
        let outputs = self.pipeline.advance_time(tick, &self.beliefs)?;
        self.absorb(tick, outputs, &mut out, &mut notes);
        for f in self.pipeline.take_failures() {
            out.log
                .push(self.entry(f.t, "error", json!({"rule": f.rule, "message": f.message})));
        }

        self.deliberate(tick, notes, &mut out);
        Ok(out)
    }

    fn entry(&self, t: Timestamp, kind: &'static str, detail: serde_json::Value) -> LogEntry {
        LogEntry {
            t,
            agent: self.id.clone(),
            kind,
            detail,
        }
    }

    /// Applies belief changes from the pipeline and shows derived events to
    /// observers.
    fn absorb(
        &mut self,
        tick: Timestamp,
        outputs: Vec<PipelineOutput>,
        out: &mut StepOutput,
        notes: &mut VecDeque<Notification>,
    ) {
        for o in outputs {
            match &o {
                PipelineOutput::Forward { event, .. } => {
                    if event.event_type() == self.position_type {
                        self.position = event.position().or(self.position);
                    }
                }
                PipelineOutput::Emit { event, .. } => {
                    self.notify_observer(tick, event, out, notes);
                }
                PipelineOutput::BeliefAdd { literal, .. } => match self.beliefs.add(literal.clone(), tick, None) {
                    Ok(Some(c)) => {
                        out.log
                            .push(self.entry(tick, "belief", json!({"change": c.to_string(), "rule": o.rule()})));
                        notes.push_back(Notification::Belief(c));
                    }
                    Ok(None) => {}
                    Err(e) => {
                        out.log
                            .push(self.entry(tick, "error", json!({"rule": o.rule(), "message": e.to_string()})))
                    }
                },
                PipelineOutput::BeliefDel { literal, .. } => {
                    for c in self.beliefs.remove(literal) {
                        out.log
                            .push(self.entry(tick, "belief", json!({"change": c.to_string(), "rule": o.rule()})));
                        notes.push_back(Notification::Belief(c));
                    }
                }
            }
            out.pipeline.push(o);
        }
    }

    fn notify_observer(
        &mut self,
        tick: Timestamp,
        ev: &Event,
        out: &mut StepOutput,
        notes: &mut VecDeque<Notification>,
    ) {
        let Some(f) = self.observers.get(ev.event_type()).copied() else {
            return;
        };
        let mut cx = self.cx(tick, out, notes);
        if let Err(m) = f(&mut cx, ev) {
            cx.log("error", json!({"observer": ev.event_type(), "message": m}));
        }
    }

    /// Runs the first applicable plan for every notification, including the
    /// ones plans raise themselves.
    fn deliberate(&mut self, now: Timestamp, mut notes: VecDeque<Notification>, out: &mut StepOutput) {
        let mut handled = 0;
        while let Some(n) = notes.pop_front() {
            handled += 1;
            if handled > MAX_NOTIFICATIONS {
                out.log
                    .push(self.entry(now, "error", json!({"message": "notification limit reached"})));
                break;
            }
            let Some((i, bindings)) = self.applicable(now, &n, out, &mut notes) else {
                continue;
            };
            let plan = self.plans[i].clone();
            out.log
                .push(self.entry(now, "plan_fired", json!({"plan": plan.name, "trigger": n.to_string()})));
            if let Err(m) = self.run_body(now, &plan, &bindings, out, &mut notes) {
                out.log
                    .push(self.entry(now, "error", json!({"plan": plan.name, "message": m})));
            }
        }
    }

    fn applicable(
        &mut self,
        now: Timestamp,
        n: &Notification,
        out: &mut StepOutput,
        notes: &mut VecDeque<Notification>,
    ) -> Option<(usize, Bindings)> {
        for i in 0..self.plans.len() {
            let Some(mut b) = self.plans[i].trigger.unify(n) else {
                continue;
            };
            let context = self.plans[i].context.clone();
            let mut ok = true;
            for c in &context {
                match c {
                    ContextCond::Holds(q) => {
                        let q = q.substitute(&b);
                        let found = self.beliefs.query(&q, &b).next().map(|(_, nb)| nb);
                        match found {
                            Some(nb) => b = nb,
                            None => ok = false,
                        }
                    }
                    ContextCond::Absent(q) => {
                        let q = q.substitute(&b);
                        ok = self.beliefs.query(&q, &b).next().is_none();
                    }
                    ContextCond::Check(name) => {
                        ok = match self.checks.get(name).copied() {
                            Some(f) => f(&mut self.cx(now, out, notes), &b),
                            None => false,
                        };
                    }
                }
                if !ok {
                    break;
                }
            }
            if ok {
                return Some((i, b));
            }
        }
        None
    }

    fn run_body(
        &mut self,
        now: Timestamp,
        plan: &Plan,
        b: &Bindings,
        out: &mut StepOutput,
        notes: &mut VecDeque<Notification>,
    ) -> Result<(), String> {
        for step in &plan.body {
            match step {
                PlanStep::Send { to, payload } => {
                    self.cx(now, out, notes).send(to.clone(), payload.restamped(now));
                }
                PlanStep::AddBelief(q) => self.cx(now, out, notes).add_belief(q.substitute(b), None)?,
                PlanStep::RemoveBelief(q) => self.cx(now, out, notes).remove_belief(&q.substitute(b)),
                PlanStep::AdoptGoal { name, args } => {
                    let args = ground(args, b)?;
                    self.cx(now, out, notes).adopt_goal(name, args);
                }
                PlanStep::ArtifactOp { artifact, op, args } => {
                    let f = *self
                        .artifacts
                        .get(artifact)
                        .ok_or_else(|| format!("unknown artifact `{artifact}`"))?;
                    let args = ground(args, b)?;
                    f(&mut self.cx(now, out, notes), op, &args)?;
                }
                PlanStep::Custom(name) => {
                    let f = *self.hooks.get(name).ok_or_else(|| format!("unknown hook `{name}`"))?;
                    f(&mut self.cx(now, out, notes), b)?;
                }
            }
        }
        Ok(())
    }
}

fn ground(args: &[Term], b: &Bindings) -> Result<Vec<Constant>, String> {
    args.iter()
        .map(|t| match t {
            Term::Const(c) => Ok(c.clone()),
            Term::Var(v) => b.get(v).cloned().ok_or_else(|| format!("variable `{v}` is unbound")),
            Term::Placeholder => Err("wildcard in a goal argument".to_owned()),
        })
        .collect()
}

/// Places messages in recipients' inboxes. Broadcasts reach every other
/// agent within the radius of the sender's current position; messages to
/// unknown agents are dropped and logged.
pub fn deliver<D>(
    outbound: Vec<(String, Outbound)>,
    agents: &mut [Agent<D>],
    tick: Timestamp,
    latency_ms: u64,
) -> Vec<LogEntry> {
    let mut log = Vec::new();
    let positions: Vec<(String, Option<GeoPoint>)> = agents.iter().map(|a| (a.id.clone(), a.position())).collect();
    for (sender, o) in outbound {
        let recipients: Vec<String> = match &o.to {
            Recipient::Agent(id) => {
                if positions.iter().any(|(a, _)| a == id) {
                    vec![id.clone()]
                } else {
                    log.push(LogEntry {
                        t: tick,
                        agent: sender.clone(),
                        kind: "error",
                        detail: json!({"message": format!("unknown recipient `{id}`, message dropped")}),
                    });
                    Vec::new()
                }
            }
            Recipient::BroadcastWithin(r) => {
                let origin = positions.iter().find(|(a, _)| *a == sender).and_then(|(_, p)| *p);
                match origin {
                    Some(o) => positions
                        .iter()
                        .filter(|(a, p)| *a != sender && p.is_some_and(|p| geo::distance(o, p) <= *r))
                        .map(|(a, _)| a.clone())
                        .collect(),
                    None => Vec::new(),
                }
            }
        };
        for to in recipients {
            let agent = agents.iter_mut().find(|a| a.id == to).expect("resolved above");
            agent.receive(Message {
                sender: sender.clone(),
                recipient: to,
                payload: o.payload.clone(),
                sent_at: tick,
                available_at: tick + latency_ms,
            });
        }
    }
    log
}
