use super::ast::{Action, Rule};
use super::{EplError, EplErrorKind};
use crate::event::SchemaRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// The source rule creates events the target consumes.
    Emit,
    /// The source expectation forwards events the target consumes.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyEdge {
    pub from: String,
    pub via: String,
    pub to: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyReport {
    pub edges: Vec<DependencyEdge>,
    /// Types targeted by a forward action; only forwarded instances of
    /// these reach interpretation rules.
    pub guarded_types: Vec<String>,
}

impl DependencyReport {
    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }
}

/// Builds the emit/consume graph of a rule set and rejects emission cycles.
pub fn validate_ruleset(rules: &[Rule], registry: &SchemaRegistry) -> Result<DependencyReport, EplError> {
    let mut report = DependencyReport::default();
    for rule in rules {
        if let Action::Forward(alias) = &rule.action {
            if let Some(atom) = rule.pattern.atoms().into_iter().find(|a| &a.alias == alias) {
                if !report.guarded_types.contains(&atom.event_type) {
                    report.guarded_types.push(atom.event_type.clone());
                }
            }
        }
    }

    for from in rules {
        let (via, kind) = match &from.action {
            Action::Emit { event_type, .. } => (event_type.clone(), EdgeKind::Emit),
            Action::Forward(alias) => match from.pattern.atoms().into_iter().find(|a| &a.alias == alias) {
                Some(a) => (a.event_type.clone(), EdgeKind::Forward),
                None => continue,
            },
            _ => continue,
        };
        let via = registry.resolve(&via).map(str::to_owned).unwrap_or(via);
        for to in rules {
            if to.kind == from.kind && kind == EdgeKind::Forward {
                continue;
            }
            if to.consumed_types().contains(&via.as_str()) {
                report.edges.push(DependencyEdge {
                    from: from.name.clone(),
                    via: via.clone(),
                    to: to.name.clone(),
                    kind,
                });
            }
        }
    }

    if let Some(cycle) = find_cycle(rules, &report.edges) {
        return Err(EplError {
            kind: EplErrorKind::CyclicEmission(cycle),
            pos: None,
        });
    }
    Ok(report)
}

fn find_cycle(rules: &[Rule], edges: &[DependencyEdge]) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let names: Vec<&str> = rules.iter().map(|r| r.name.as_str()).collect();
    let index = |n: &str| names.iter().position(|m| *m == n);
    let succ: Vec<Vec<usize>> = (0..rules.len())
        .map(|i| {
            edges
                .iter()
                .filter(|e| e.kind == EdgeKind::Emit && index(&e.from) == Some(i))
                .filter_map(|e| index(&e.to))
                .collect()
        })
        .collect();

    fn dfs(v: usize, succ: &[Vec<usize>], marks: &mut [Mark], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        marks[v] = Mark::Active;
        stack.push(v);
        for &w in &succ[v] {
            match marks[w] {
                Mark::Active => {
                    let start = stack.iter().position(|&x| x == w).expect("on stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(w);
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = dfs(w, succ, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[v] = Mark::Done;
        None
    }

    let mut marks = vec![Mark::New; rules.len()];
    for v in 0..rules.len() {
        if marks[v] == Mark::New {
            if let Some(c) = dfs(v, &succ, &mut marks, &mut Vec::new()) {
                return Some(c.into_iter().map(|i| names[i].to_owned()).collect());
            }
        }
    }
    None
}
