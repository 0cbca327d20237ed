//! Rule syntax tree.

use crate::belief::{BeliefQuery, Constant, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Filters the percept stream before interpretation.
    Expectation,
    /// Derives context or situations from percept patterns.
    Interpretation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub name: String,
    pub kind: RuleKind,
    /// Empty means `SELECT *`.
    pub select: Vec<SelectItem>,
    pub pattern: PatternNode,
    pub where_clause: Option<Expr>,
    pub action: Action,
}

impl Rule {
    /// Aliases bound by the pattern, in binding (source) order.
    pub fn aliases(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.pattern.collect_aliases(&mut out);
        out
    }

    /// Event types the pattern listens to, including negated ones.
    pub fn consumed_types(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.pattern.collect_types(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectItem {
    pub expr: Expr,
    pub alias: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub alias: String,
    pub event_type: String,
    pub filter: Option<Expr>,
    pub every: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatternNode {
    Atom(Atom),
    /// `left -> right`
    Seq(Box<PatternNode>, Box<PatternNode>),
    And(Box<PatternNode>, Box<PatternNode>),
    Or(Box<PatternNode>, Box<PatternNode>),
    /// `timer:interval(duration) and not absent`
    NotWithin {
        duration: Expr,
        absent: String,
    },
    /// `child.window:time(duration)`
    TimeWindow {
        child: Box<PatternNode>,
        duration: Expr,
    },
    /// `child.window:time_batch(duration)`
    BatchWindow {
        child: Box<PatternNode>,
        duration: Expr,
    },
}

impl PatternNode {
    fn collect_aliases<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            PatternNode::Atom(a) => out.push(&a.alias),
            PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
                l.collect_aliases(out);
                r.collect_aliases(out);
            }
            PatternNode::NotWithin { .. } => {}
            PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => {
                child.collect_aliases(out)
            }
        }
    }

    fn collect_types<'a>(&'a self, out: &mut Vec<&'a str>) {
        let mut push = |t: &'a str| {
            if !out.contains(&t) {
                out.push(t)
            }
        };
        match self {
            PatternNode::Atom(a) => push(&a.event_type),
            PatternNode::NotWithin { absent, .. } => push(absent),
            PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
                l.collect_types(out);
                r.collect_types(out);
            }
            PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => child.collect_types(out),
        }
    }

    /// Atoms in binding order.
    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.visit_atoms(&mut |a| out.push(a));
        out
    }

    fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a Atom)) {
        match self {
            PatternNode::Atom(a) => f(a),
            PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
                l.visit_atoms(f);
                r.visit_atoms(f);
            }
            PatternNode::NotWithin { .. } => {}
            PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => child.visit_atoms(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "or",
            BinOp::And => "and",
            BinOp::Eq => "=",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Avg,
    Max,
    Min,
    Sum,
}

impl AggFunc {
    pub fn name(self) -> &'static str {
        match self {
            AggFunc::Avg => "avg",
            AggFunc::Max => "max",
            AggFunc::Min => "min",
            AggFunc::Sum => "sum",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "avg" => AggFunc::Avg,
            "max" => AggFunc::Max,
            "min" => AggFunc::Min,
            "sum" => AggFunc::Sum,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefOp {
    Contains,
    Get,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Num(f64),
    Str(String),
    Bool(bool),
    /// Normalized to milliseconds.
    Duration(u64),
    /// Normalized to meters.
    Distance(f64),
    /// `alias` or `alias.attr`.
    Path(Vec<String>),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// Service call such as `Geo.distance(...)`.
    Call {
        service: String,
        args: Vec<Expr>,
    },
    Aggregate {
        func: AggFunc,
        arg: Box<Expr>,
    },
    Belief {
        op: BeliefOp,
        template: LiteralTemplate,
    },
}

impl Expr {
    pub fn path(parts: &[&str]) -> Expr {
        Expr::Path(parts.iter().map(|s| (*s).to_owned()).collect())
    }

    /// Visits every alias referenced by this expression.
    pub fn visit_aliases<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        match self {
            Expr::Path(p) => f(&p[0]),
            Expr::Unary(_, e) => e.visit_aliases(f),
            Expr::Binary(_, l, r) => {
                l.visit_aliases(f);
                r.visit_aliases(f);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.visit_aliases(f)),
            Expr::Aggregate { arg, .. } => arg.visit_aliases(f),
            Expr::Belief { template, .. } => template.visit_aliases(f),
            _ => {}
        }
    }

    pub fn aliases(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_aliases(&mut |a| {
            if !out.contains(&a) {
                out.push(a)
            }
        });
        out
    }

    /// Splits a conjunction into its top-level terms.
    pub fn conjuncts(&self) -> Vec<&Expr> {
        match self {
            Expr::Binary(BinOp::And, l, r) => {
                let mut v = l.conjuncts();
                v.extend(r.conjuncts());
                v
            }
            e => vec![e],
        }
    }

    pub fn and(self, other: Expr) -> Expr {
        Expr::Binary(BinOp::And, Box::new(self), Box::new(other))
    }
}

/// Argument of a belief literal template.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplateArg {
    Term(Term),
    /// Spliced expression, evaluated to a constant at firing time.
    Hole(Expr),
}

/// Belief literal with expression holes, written in rules as string
/// concatenation, e.g. `"hasParcel(" + parcel.id + ", Lat, _)"`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiteralTemplate {
    pub functor: String,
    pub args: Vec<TemplateArg>,
}

impl LiteralTemplate {
    pub fn visit_aliases<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        for a in &self.args {
            if let TemplateArg::Hole(e) = a {
                e.visit_aliases(f);
            }
        }
    }

    pub fn variables(&self) -> Vec<&str> {
        let mut vars: Vec<&str> = Vec::new();
        for a in &self.args {
            if let TemplateArg::Term(Term::Var(v)) = a {
                if !vars.contains(&v.as_str()) {
                    vars.push(v);
                }
            }
        }
        vars
    }

    /// Fills holes with already evaluated constants.
    pub fn instantiate(&self, mut holes: impl FnMut(&Expr) -> Constant) -> BeliefQuery {
        BeliefQuery {
            functor: self.functor.clone(),
            args: self
                .args
                .iter()
                .map(|a| match a {
                    TemplateArg::Term(t) => t.clone(),
                    TemplateArg::Hole(e) => Term::Const(holes(e)),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitArg {
    pub name: Option<String>,
    pub value: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Forward(String),
    Emit { event_type: String, args: Vec<EmitArg> },
    AddBelief(LiteralTemplate),
    RemoveBelief(LiteralTemplate),
}
