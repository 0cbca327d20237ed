//! Canonical rule text. Parsing the output yields the same syntax tree.

use super::ast::*;
use crate::belief::{Constant, Term};

// Expression precedence levels used for minimal parenthesization.
const P_OR: u8 = 1;
const P_AND: u8 = 2;
const P_NOT: u8 = 3;
const P_CMP: u8 = 4;
const P_ADD: u8 = 5;
const P_MUL: u8 = 6;
const P_NEG: u8 = 7;
const P_ATOM: u8 = 8;

// Pattern precedence levels.
const Q_SEQ: u8 = 1;
const Q_OR: u8 = 2;
const Q_AND: u8 = 3;
const Q_UNARY: u8 = 4;

pub fn pretty_print(rule: &Rule) -> String {
    let mut out = format!("// {}\n", rule.name);
    if rule.select.is_empty() {
        out.push_str("SELECT *\n");
    } else {
        let items: Vec<String> = rule
            .select
            .iter()
            .map(|s| format!("{} as {}", expr(&s.expr), s.alias))
            .collect();
        out.push_str(&format!("SELECT {}\n", items.join(", ")));
    }
    out.push_str(&format!("FROM pattern [{}]\n", pattern(&rule.pattern, 0)));
    if let Some(w) = &rule.where_clause {
        out.push_str(&format!("WHERE {}\n", expr(w)));
    }
    out.push_str(&format!("ACTION: {}\n", action(&rule.action)));
    out
}

fn action(a: &Action) -> String {
    match a {
        Action::Forward(alias) => format!("forward {alias}"),
        Action::Emit { event_type, args } if args.is_empty() => format!("new {event_type}"),
        Action::Emit { event_type, args } => {
            let args: Vec<String> = args
                .iter()
                .map(|a| match &a.name {
                    Some(n) => format!("{n} = {}", expr(&a.value)),
                    // A bare `x = y` would read back as a named argument.
                    None if matches!(a.value, Expr::Binary(BinOp::Eq, ..)) => {
                        format!("({})", expr(&a.value))
                    }
                    None => expr(&a.value),
                })
                .collect();
            format!("new {event_type}({})", args.join(", "))
        }
        Action::AddBelief(t) => format!("BB.add({})", template(t)),
        Action::RemoveBelief(t) => format!("BB.remove({})", template(t)),
    }
}

fn paren(s: String, needed: bool) -> String {
    if needed {
        format!("({s})")
    } else {
        s
    }
}

fn pattern(p: &PatternNode, min: u8) -> String {
    let (text, prec) = match p {
        PatternNode::Atom(a) => (atom(a), Q_UNARY),
        PatternNode::Seq(l, r) => (format!("{} -> {}", pattern(l, Q_SEQ), pattern(r, Q_OR)), Q_SEQ),
        PatternNode::Or(l, r) => (format!("{} or {}", pattern(l, Q_OR), pattern(r, Q_AND)), Q_OR),
        PatternNode::And(l, r) => (format!("{} and {}", pattern(l, Q_AND), pattern(r, Q_UNARY)), Q_AND),
        PatternNode::NotWithin { duration, absent } => (
            format!("(timer:interval({}) and not {absent})", expr(duration)),
            Q_UNARY,
        ),
        PatternNode::TimeWindow { child, duration } => (window(child, "time", duration), Q_UNARY),
        PatternNode::BatchWindow { child, duration } => (window(child, "time_batch", duration), Q_UNARY),
    };
    paren(text, prec < min)
}

fn window(child: &PatternNode, kind: &str, duration: &Expr) -> String {
    let inner = match child {
        PatternNode::Atom(_) => pattern(child, Q_UNARY),
        PatternNode::TimeWindow { .. } | PatternNode::BatchWindow { .. } => pattern(child, Q_UNARY),
        _ => format!("({})", pattern(child, 0)),
    };
    format!("{inner}.window:{kind}({})", expr(duration))
}

fn atom(a: &Atom) -> String {
    let every = if a.every { "every " } else { "" };
    match &a.filter {
        Some(f) => format!("{every}{}={}({})", a.alias, a.event_type, expr(f)),
        None => format!("{every}{}={}", a.alias, a.event_type),
    }
}

fn expr(e: &Expr) -> String {
    expr_prec(e, 0)
}

fn binop_prec(op: BinOp) -> u8 {
    match op.precedence() {
        1 => P_OR,
        2 => P_AND,
        3 => P_CMP,
        4 => P_ADD,
        _ => P_MUL,
    }
}

fn expr_prec(e: &Expr, min: u8) -> String {
    let (text, prec) = match e {
        Expr::Int(i) => (i.to_string(), P_ATOM),
        Expr::Num(x) => (format!("{x:?}"), P_ATOM),
        Expr::Str(s) => (quote(s, '"'), P_ATOM),
        Expr::Bool(b) => (b.to_string(), P_ATOM),
        Expr::Duration(ms) => (format!("{ms} ms"), P_ATOM),
        Expr::Distance(m) => (format!("{m:?} meters"), P_ATOM),
        Expr::Path(p) => (p.join("."), P_ATOM),
        Expr::Unary(UnOp::Neg, x) => (format!("-{}", expr_prec(x, P_ATOM)), P_NEG),
        Expr::Unary(UnOp::Not, x) => (format!("not {}", expr_prec(x, P_CMP)), P_NOT),
        Expr::Binary(op, l, r) => {
            let p = binop_prec(*op);
            // Comparisons do not chain, so both sides bind tighter.
            let left_min = if p == P_CMP { p + 1 } else { p };
            (
                format!("{} {} {}", expr_prec(l, left_min), op.symbol(), expr_prec(r, p + 1)),
                p,
            )
        }
        Expr::Call { service, args } => {
            let args: Vec<String> = args.iter().map(expr).collect();
            (format!("{service}({})", args.join(", ")), P_ATOM)
        }
        Expr::Aggregate { func, arg } => (format!("{}({})", func.name(), expr(arg)), P_ATOM),
        Expr::Belief { op, template: t } => {
            let name = match op {
                BeliefOp::Contains => "contains",
                BeliefOp::Get => "get",
            };
            (format!("BB.{name}({})", template(t)), P_ATOM)
        }
    };
    paren(text, prec < min)
}

fn quote(s: &str, q: char) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push(q);
    for c in s.chars() {
        if c == q || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push(q);
    out
}

fn constant(c: &Constant) -> String {
    match c {
        Constant::Num(x) => format!("{x:?}"),
        Constant::Atom(s) => {
            let mut chars = s.chars();
            let bare = matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
            if bare {
                s.clone()
            } else {
                quote(s, '\'')
            }
        }
    }
}

/// Renders a literal template as a string concatenation with holes.
fn template(t: &LiteralTemplate) -> String {
    enum Part {
        Text(String),
        Hole(String),
    }
    let mut parts = vec![Part::Text(t.functor.clone())];
    let push_text = |parts: &mut Vec<Part>, s: &str| match parts.last_mut() {
        Some(Part::Text(prev)) => prev.push_str(s),
        _ => parts.push(Part::Text(s.to_owned())),
    };
    if !t.args.is_empty() {
        push_text(&mut parts, "(");
        for (i, a) in t.args.iter().enumerate() {
            if i > 0 {
                push_text(&mut parts, ", ");
            }
            match a {
                TemplateArg::Term(Term::Const(c)) => push_text(&mut parts, &constant(c)),
                TemplateArg::Term(Term::Placeholder) => push_text(&mut parts, "_"),
                TemplateArg::Term(Term::Var(v)) => push_text(&mut parts, v),
                // Holes sit inside a `+` chain, so sums need parentheses.
                TemplateArg::Hole(e) => parts.push(Part::Hole(expr_prec(e, P_MUL))),
            }
        }
        push_text(&mut parts, ")");
    }
    parts
        .into_iter()
        .map(|p| match p {
            Part::Text(s) => quote(&s, '"'),
            Part::Hole(h) => h,
        })
        .collect::<Vec<_>>()
        .join(" + ")
}
