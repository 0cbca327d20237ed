//! Pattern instances. A rule's pattern is compiled into an arena of node
//! specs; live state is a tree of instances that consume events and timer
//! expiries and emit completed (sub)matches.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::belief::BeliefBase;
use crate::epl::{Expr, PatternNode};
use crate::event::{Event, Timestamp};

use super::eval::{Partial, Scope, Services};

#[derive(Debug, Clone)]
pub(crate) struct AtomSpec {
    pub slot: usize,
    pub event_type: String,
    pub filter: Option<Expr>,
    pub every: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum NodeSpec {
    Atom(AtomSpec),
    Seq(usize, usize),
    Or(usize, usize),
    /// Conjunction of atoms. `every` atoms trigger, the others hold the
    /// latest event of their type.
    And(Vec<AtomSpec>),
    NotWithin {
        duration: Expr,
        absent: String,
    },
    Window {
        child: usize,
        duration: Expr,
        /// Slot of the windowed atom, whose contents feed aggregates.
        group: Option<usize>,
    },
    Batch {
        atom: AtomSpec,
        period: u64,
    },
}

pub(crate) fn build(p: &PatternNode, names: &[String], arena: &mut Vec<NodeSpec>) -> usize {
    let slot = |alias: &str| names.iter().position(|n| n == alias).expect("alias collected");
    let atom_spec = |a: &crate::epl::Atom| AtomSpec {
        slot: slot(&a.alias),
        event_type: a.event_type.clone(),
        filter: a.filter.clone(),
        every: a.every,
    };
    let spec = match p {
        PatternNode::Atom(a) => NodeSpec::Atom(atom_spec(a)),
        PatternNode::Seq(l, r) => {
            let l = build(l, names, arena);
            let r = build(r, names, arena);
            NodeSpec::Seq(l, r)
        }
        PatternNode::Or(l, r) => {
            let l = build(l, names, arena);
            let r = build(r, names, arena);
            NodeSpec::Or(l, r)
        }
        PatternNode::And(..) => NodeSpec::And(p.atoms().into_iter().map(atom_spec).collect()),
        PatternNode::NotWithin { duration, absent } => NodeSpec::NotWithin {
            duration: duration.clone(),
            absent: absent.clone(),
        },
        PatternNode::TimeWindow { child, duration } => {
            let group = match &**child {
                PatternNode::Atom(a) => Some(slot(&a.alias)),
                _ => None,
            };
            let child = build(child, names, arena);
            NodeSpec::Window {
                child,
                duration: duration.clone(),
                group,
            }
        }
        PatternNode::BatchWindow { child, duration } => {
            let PatternNode::Atom(a) = &**child else {
                unreachable!("validated: batch windows wrap a single atom")
            };
            let Expr::Duration(period) = duration else {
                unreachable!("validated: batch windows have constant durations")
            };
            NodeSpec::Batch {
                atom: atom_spec(a),
                period: *period,
            }
        }
    };
    arena.push(spec);
    arena.len() - 1
}

/// Shared, read-only state for one feed or advance step.
pub(crate) struct Ctx<'a> {
    pub nodes: &'a [NodeSpec],
    pub names: &'a [String],
    pub bb: &'a BeliefBase,
    pub services: &'a Services,
    pub errors: &'a mut Vec<String>,
}

impl Ctx<'_> {
    fn scope<'s>(&'s self, partial: &'s Partial) -> Scope<'s> {
        Scope {
            names: self.names,
            partial,
            outputs: &[],
            bb: self.bb,
            services: self.services,
        }
    }

    /// Evaluates an atom filter; evaluation errors count as a failed match.
    fn passes(&mut self, filter: &Option<Expr>, partial: &Partial) -> bool {
        let Some(f) = filter else { return true };
        let r = self.scope(partial).truthy(f);
        match r {
            Ok(b) => b,
            Err(m) => {
                self.errors.push(m);
                false
            }
        }
    }

    fn duration(&mut self, e: &Expr, partial: &Partial) -> Option<u64> {
        let r = self.scope(partial).eval(e).and_then(|v| v.as_num());
        match r {
            Ok(ms) if ms > 0.0 => Some(ms as u64),
            Ok(ms) => {
                self.errors.push(format!("window duration must be positive, got {ms}"));
                None
            }
            Err(m) => {
                self.errors.push(m);
                None
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Emission {
    pub partial: Partial,
    pub ts: Timestamp,
}

#[derive(Debug, Clone)]
pub(crate) enum Inst {
    Atom {
        node: usize,
        base: Partial,
        done: bool,
    },
    Seq {
        node: usize,
        left: Box<Inst>,
        rights: Vec<Inst>,
    },
    Or {
        left: Box<Inst>,
        right: Box<Inst>,
        done: bool,
    },
    And {
        node: usize,
        base: Partial,
        latest: Vec<Option<Arc<Event>>>,
        done: bool,
    },
    NotWithin {
        node: usize,
        base: Partial,
        deadline: Timestamp,
        done: bool,
    },
    Window {
        node: usize,
        child: Box<Inst>,
        /// Armed windows die once time passes this instant; unarmed
        /// (persistent) windows instead bound the span of their matches.
        expires: Option<Timestamp>,
        span: u64,
        contents: VecDeque<Arc<Event>>,
        dead: bool,
    },
    Batch {
        node: usize,
        base: Partial,
        index: u64,
        items: Vec<Arc<Event>>,
        done: bool,
    },
}

impl Inst {
    /// Starts matching `node` at `start` with the bindings in `base`.
    pub fn spawn(node: usize, base: Partial, start: Timestamp, ctx: &mut Ctx) -> Inst {
        match &ctx.nodes[node] {
            NodeSpec::Atom(_) => Inst::Atom {
                node,
                base,
                done: false,
            },
            NodeSpec::Seq(l, _) => {
                let left = Inst::spawn(*l, base, start, ctx);
                Inst::Seq {
                    node,
                    left: Box::new(left),
                    rights: Vec::new(),
                }
            }
            NodeSpec::Or(l, r) => {
                let (l, r) = (*l, *r);
                let left = Inst::spawn(l, base.clone(), start, ctx);
                let right = Inst::spawn(r, base, start, ctx);
                Inst::Or {
                    left: Box::new(left),
                    right: Box::new(right),
                    done: false,
                }
            }
            NodeSpec::And(atoms) => Inst::And {
                node,
                latest: vec![None; atoms.len()],
                base,
                done: false,
            },
            NodeSpec::NotWithin { duration, .. } => {
                let duration = duration.clone();
                match ctx.duration(&duration, &base) {
                    Some(d) => Inst::NotWithin {
                        node,
                        base,
                        deadline: start + d,
                        done: false,
                    },
                    None => Inst::NotWithin {
                        node,
                        base,
                        deadline: start,
                        done: true,
                    },
                }
            }
            NodeSpec::Window { child, duration, .. } => {
                let (child, duration) = (*child, duration.clone());
                let armed = base.start.is_some();
                let span = ctx.duration(&duration, &base);
                let child = Inst::spawn(child, base, start, ctx);
                Inst::Window {
                    node,
                    child: Box::new(child),
                    expires: if armed { span.map(|d| start + d) } else { None },
                    span: span.unwrap_or(0),
                    contents: VecDeque::new(),
                    dead: span.is_none(),
                }
            }
            NodeSpec::Batch { period, .. } => Inst::Batch {
                node,
                index: start / period,
                base,
                items: Vec::new(),
                done: false,
            },
        }
    }

    pub fn is_dead(&self) -> bool {
        match self {
            Inst::Atom { done, .. }
            | Inst::Or { done, .. }
            | Inst::And { done, .. }
            | Inst::NotWithin { done, .. }
            | Inst::Batch { done, .. } => *done,
            Inst::Seq { left, rights, .. } => left.is_dead() && rights.is_empty(),
            Inst::Window { dead, child, .. } => *dead || child.is_dead(),
        }
    }

    /// Earliest instant at which `advance` would produce something.
    pub fn next_deadline(&self, nodes: &[NodeSpec]) -> Option<Timestamp> {
        match self {
            Inst::NotWithin { deadline, done, .. } => (!done).then_some(*deadline),
            Inst::Batch {
                node,
                index,
                items,
                done,
                ..
            } => {
                let NodeSpec::Batch { period, .. } = &nodes[*node] else {
                    unreachable!()
                };
                (!done && !items.is_empty()).then_some((index + 1) * period)
            }
            Inst::Seq { left, rights, .. } => rights
                .iter()
                .filter_map(|r| r.next_deadline(nodes))
                .chain(left.next_deadline(nodes))
                .min(),
            Inst::Or { left, right, done } => {
                if *done {
                    None
                } else {
                    [left.next_deadline(nodes), right.next_deadline(nodes)]
                        .into_iter()
                        .flatten()
                        .min()
                }
            }
            Inst::Window { child, dead, .. } => {
                if *dead {
                    None
                } else {
                    child.next_deadline(nodes)
                }
            }
            Inst::Atom { .. } | Inst::And { .. } => None,
        }
    }

    pub fn feed(&mut self, ev: &Arc<Event>, ctx: &mut Ctx) -> Vec<Emission> {
        match self {
            Inst::Atom { node, base, done } => {
                if *done {
                    return Vec::new();
                }
                let NodeSpec::Atom(spec) = &ctx.nodes[*node] else {
                    unreachable!()
                };
                if spec.event_type != ev.event_type() {
                    return Vec::new();
                }
                let spec = spec.clone();
                let candidate = base.bind(spec.slot, ev);
                if !ctx.passes(&spec.filter, &candidate) {
                    return Vec::new();
                }
                if !spec.every {
                    *done = true;
                }
                vec![Emission {
                    partial: candidate,
                    ts: ev.timestamp(),
                }]
            }
            Inst::Seq { node, left, rights } => {
                let NodeSpec::Seq(_, right_node) = ctx.nodes[*node] else {
                    unreachable!()
                };
                let mut out = Vec::new();
                for r in rights.iter_mut() {
                    out.extend(r.feed(ev, ctx));
                }
                rights.retain(|r| !r.is_dead());
                for em in left.feed(ev, ctx) {
                    let r = Inst::spawn(right_node, em.partial, em.ts, ctx);
                    if !r.is_dead() {
                        rights.push(r);
                    }
                }
                out
            }
            Inst::Or { left, right, done } => {
                if *done {
                    return Vec::new();
                }
                let mut out = left.feed(ev, ctx);
                let left_finished = !out.is_empty() && left.is_dead();
                let right_out = right.feed(ev, ctx);
                let right_finished = !right_out.is_empty() && right.is_dead();
                out.extend(right_out);
                if left_finished || right_finished || (left.is_dead() && right.is_dead()) {
                    *done = true;
                }
                out
            }
            Inst::And {
                node,
                base,
                latest,
                done,
            } => {
                if *done {
                    return Vec::new();
                }
                let NodeSpec::And(atoms) = &ctx.nodes[*node] else {
                    unreachable!()
                };
                let atoms = atoms.clone();
                let has_trigger = atoms.iter().any(|a| a.every);
                let mut out = Vec::new();
                for (i, a) in atoms.iter().enumerate() {
                    if a.event_type != ev.event_type() {
                        continue;
                    }
                    if a.every {
                        if let Some(p) = and_candidate(&atoms, latest, base, Some((i, ev)), ctx) {
                            out.push(Emission {
                                partial: p,
                                ts: ev.timestamp(),
                            });
                        }
                    } else {
                        latest[i] = Some(ev.clone());
                        if !has_trigger {
                            if let Some(p) = and_candidate(&atoms, latest, base, None, ctx) {
                                out.push(Emission {
                                    partial: p,
                                    ts: ev.timestamp(),
                                });
                                *done = true;
                                break;
                            }
                        }
                    }
                }
                out
            }
            Inst::NotWithin {
                node,
                base,
                deadline,
                done,
            } => {
                if *done {
                    return Vec::new();
                }
                let NodeSpec::NotWithin { duration, absent } = &ctx.nodes[*node] else {
                    unreachable!()
                };
                if absent == ev.event_type() {
                    let duration = duration.clone();
                    if let Some(d) = ctx.duration(&duration, base) {
                        *deadline = ev.timestamp() + d;
                    }
                }
                Vec::new()
            }
            Inst::Window {
                node,
                child,
                span,
                contents,
                dead,
                ..
            } => {
                if *dead {
                    return Vec::new();
                }
                let NodeSpec::Window { group, .. } = ctx.nodes[*node] else {
                    unreachable!()
                };
                let mut out = child.feed(ev, ctx);
                if let Some(slot) = group {
                    for em in &mut out {
                        if let Some(e) = em.partial.slots[slot].clone() {
                            contents.push_back(e);
                        }
                    }
                    evict(contents, ev.timestamp().saturating_sub(*span));
                    if !out.is_empty() {
                        let g = Arc::new(contents.iter().cloned().collect::<Vec<_>>());
                        for em in &mut out {
                            em.partial.groups[slot] = Some(g.clone());
                        }
                    }
                }
                out
            }
            Inst::Batch {
                node,
                base,
                index,
                items,
                done,
            } => {
                if *done {
                    return Vec::new();
                }
                let NodeSpec::Batch { atom, period } = &ctx.nodes[*node] else {
                    unreachable!()
                };
                if atom.event_type != ev.event_type() {
                    return Vec::new();
                }
                let (atom, period) = (atom.clone(), *period);
                if !ctx.passes(&atom.filter, &base.bind(atom.slot, ev)) {
                    return Vec::new();
                }
                if items.is_empty() {
                    *index = ev.timestamp() / period;
                }
                items.push(ev.clone());
                Vec::new()
            }
        }
    }

    /// Moves time forward to `to`, firing timers and batch boundaries that
    /// fall at or before it and expiring armed windows.
    pub fn advance(&mut self, to: Timestamp, ctx: &mut Ctx) -> Vec<Emission> {
        match self {
            Inst::Atom { .. } | Inst::And { .. } => Vec::new(),
            Inst::NotWithin {
                base, deadline, done, ..
            } => {
                if *done || *deadline > to {
                    return Vec::new();
                }
                *done = true;
                vec![Emission {
                    partial: base.clone(),
                    ts: *deadline,
                }]
            }
            Inst::Batch {
                node,
                base,
                index,
                items,
                done,
            } => {
                let NodeSpec::Batch { atom, period } = &ctx.nodes[*node] else {
                    unreachable!()
                };
                let boundary = (*index + 1) * period;
                if *done || items.is_empty() || boundary > to {
                    return Vec::new();
                }
                let batch = std::mem::take(items);
                let mut partial = base.bind(atom.slot, batch.last().expect("non-empty"));
                partial.start = Some(batch[0].timestamp());
                partial.groups[atom.slot] = Some(Arc::new(batch));
                if !atom.every {
                    *done = true;
                }
                *index = to / period;
                vec![Emission { partial, ts: boundary }]
            }
            Inst::Seq { node, left, rights } => {
                let NodeSpec::Seq(_, right_node) = ctx.nodes[*node] else {
                    unreachable!()
                };
                let mut out = Vec::new();
                for r in rights.iter_mut() {
                    out.extend(r.advance(to, ctx));
                }
                rights.retain(|r| !r.is_dead());
                for em in left.advance(to, ctx) {
                    let mut r = Inst::spawn(right_node, em.partial, em.ts, ctx);
                    out.extend(r.advance(to, ctx));
                    if !r.is_dead() {
                        rights.push(r);
                    }
                }
                out
            }
            Inst::Or { left, right, done } => {
                if *done {
                    return Vec::new();
                }
                let mut out = left.advance(to, ctx);
                let left_finished = !out.is_empty() && left.is_dead();
                let right_out = right.advance(to, ctx);
                let right_finished = !right_out.is_empty() && right.is_dead();
                out.extend(right_out);
                if left_finished || right_finished || (left.is_dead() && right.is_dead()) {
                    *done = true;
                }
                out
            }
            Inst::Window {
                child,
                expires,
                span,
                contents,
                dead,
                ..
            } => {
                if *dead {
                    return Vec::new();
                }
                if let Some(e) = expires {
                    if to > *e {
                        *dead = true;
                        return Vec::new();
                    }
                }
                let out = child.advance(to, ctx);
                if expires.is_none() {
                    // Persistent window: drop matches that can no longer
                    // complete within the span.
                    let min_start = to.saturating_sub(*span);
                    child.prune(min_start);
                    evict(contents, min_start);
                }
                out
            }
        }
    }

    /// Removes partial matches that started before `min_start`.
    pub fn prune(&mut self, min_start: Timestamp) {
        match self {
            Inst::Seq { left, rights, .. } => {
                rights.retain(|r| r.start().is_none_or(|s| s >= min_start));
                for r in rights.iter_mut() {
                    r.prune(min_start);
                }
                left.prune(min_start);
            }
            Inst::Or { left, right, .. } => {
                left.prune(min_start);
                right.prune(min_start);
            }
            Inst::And { latest, .. } => {
                for l in latest.iter_mut() {
                    if l.as_ref().is_some_and(|e| e.timestamp() < min_start) {
                        *l = None;
                    }
                }
            }
            Inst::Window { child, .. } => child.prune(min_start),
            Inst::Atom { .. } | Inst::NotWithin { .. } | Inst::Batch { .. } => {}
        }
    }

    /// Timestamp of the earliest binding this instance was spawned with.
    fn start(&self) -> Option<Timestamp> {
        match self {
            Inst::Atom { base, .. }
            | Inst::And { base, .. }
            | Inst::NotWithin { base, .. }
            | Inst::Batch { base, .. } => base.start,
            Inst::Seq { left, .. } => left.start(),
            Inst::Or { left, .. } => left.start(),
            Inst::Window { child, .. } => child.start(),
        }
    }

    /// Start times of every live partial match below this instance.
    pub fn partial_starts(&self, out: &mut Vec<Timestamp>) {
        match self {
            Inst::Seq { left, rights, .. } => {
                for r in rights {
                    if let Some(s) = r.start() {
                        out.push(s);
                    }
                    r.partial_starts(out);
                }
                left.partial_starts(out);
            }
            Inst::Or { left, right, .. } => {
                left.partial_starts(out);
                right.partial_starts(out);
            }
            Inst::And { latest, .. } => {
                out.extend(latest.iter().flatten().map(|e| e.timestamp()));
            }
            Inst::Window { child, .. } => child.partial_starts(out),
            Inst::Atom { .. } | Inst::NotWithin { .. } | Inst::Batch { .. } => {}
        }
    }
}

fn evict(contents: &mut VecDeque<Arc<Event>>, min_ts: Timestamp) {
    while contents.front().is_some_and(|e| e.timestamp() < min_ts) {
        contents.pop_front();
    }
}

fn and_candidate(
    atoms: &[AtomSpec],
    latest: &[Option<Arc<Event>>],
    base: &Partial,
    trigger: Option<(usize, &Arc<Event>)>,
    ctx: &mut Ctx,
) -> Option<Partial> {
    let mut p = base.clone();
    for (i, a) in atoms.iter().enumerate() {
        let ev = match trigger {
            Some((t, ev)) if t == i => ev,
            _ if a.every => continue,
            _ => latest[i].as_ref()?,
        };
        p = p.bind(a.slot, ev);
    }
    for (i, a) in atoms.iter().enumerate() {
        let bound = !a.every || trigger.is_some_and(|(t, _)| t == i);
        if bound && !ctx.passes(&a.filter, &p) {
            return None;
        }
    }
    Some(p)
}
