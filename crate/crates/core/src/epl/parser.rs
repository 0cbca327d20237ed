//! Recursive-descent parser. Pattern operator precedence, loosest first:
//! `->`, `or`, `and`, then `every`/`not`, then the `.window:` postfixes.

use std::collections::HashMap;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::{EplError, EplErrorKind, Pos};
use crate::belief::{Constant, Term};
use crate::event::SchemaRegistry;

const RESERVED: &[&str] = &[
    "select",
    "from",
    "where",
    "action",
    "condition",
    "pattern",
    "as",
    "and",
    "or",
    "not",
    "every",
];

/// Parses and validates a single rule.
pub fn parse_rule(source: &str, registry: &SchemaRegistry) -> Result<Rule, EplError> {
    let mut p = Parser::new(source, registry)?;
    let rule = p.rule()?;
    if !p.at(&Tok::Eof) {
        return Err(p.unexpected("end of rule"));
    }
    Ok(rule)
}

/// Parses a rule file: one or more rules, conventionally separated by blank
/// lines. Leading `//` comments of a rule become its name.
pub fn parse_rules(source: &str, registry: &SchemaRegistry) -> Result<Vec<Rule>, EplError> {
    let mut p = Parser::new(source, registry)?;
    let mut rules = Vec::new();
    while !p.at(&Tok::Eof) {
        rules.push(p.rule()?);
    }
    Ok(rules)
}

enum Operand {
    Pat(PatternNode),
    Timer(Expr, Pos),
    Not(String, Pos),
    Filter(Expr, Pos),
}

struct Parser<'r> {
    toks: Vec<Token>,
    /// Comments that precede the token at the same index.
    comments: Vec<Vec<String>>,
    i: usize,
    registry: &'r SchemaRegistry,
    path_pos: HashMap<String, Pos>,
    atom_pos: HashMap<String, Pos>,
    rule_pos: Pos,
    anon: usize,
}

impl<'r> Parser<'r> {
    fn new(source: &str, registry: &'r SchemaRegistry) -> Result<Self, EplError> {
        let mut toks = Vec::new();
        let mut comments = Vec::new();
        let mut pending = Vec::new();
        for t in tokenize(source)? {
            match t.tok {
                Tok::Comment(c) => pending.push(c),
                _ => {
                    toks.push(t);
                    comments.push(std::mem::take(&mut pending));
                }
            }
        }
        Ok(Self {
            toks,
            comments,
            i: 0,
            registry,
            path_pos: HashMap::new(),
            atom_pos: HashMap::new(),
            rule_pos: Pos::default(),
            anon: 0,
        })
    }

    // -- token helpers ----------------------------------------------------

    fn peek(&self) -> &Tok {
        &self.toks[self.i].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let j = (self.i + k).min(self.toks.len() - 1);
        &self.toks[j].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.i].pos
    }

    fn at(&self, t: &Tok) -> bool {
        self.peek() == t
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.at(t) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: &Tok) -> Result<(), EplError> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{}`", t.describe())))
        }
    }

    fn unexpected(&self, wanted: &str) -> EplError {
        self.syntax_at(
            self.pos(),
            format!("expected {wanted}, found `{}`", self.peek().describe()),
        )
    }

    fn syntax_at(&self, pos: Pos, msg: String) -> EplError {
        EplError::new(EplErrorKind::SyntaxError(msg), pos)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn is_kw_at(&self, k: usize, kw: &str) -> bool {
        matches!(self.peek_at(k), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), EplError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), EplError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.advance();
                Ok((s, pos))
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn event_type(&mut self) -> Result<String, EplError> {
        let (name, pos) = self.ident("event type")?;
        self.registry
            .resolve(&name)
            .map(str::to_owned)
            .ok_or_else(|| EplError::new(EplErrorKind::UnknownEventType(name), pos))
    }

    // -- rules --------------------------------------------------------------

    fn rule(&mut self) -> Result<Rule, EplError> {
        self.path_pos.clear();
        self.atom_pos.clear();
        self.rule_pos = self.pos();
        let header = self.comments[self.i].join(" ");
        let name = if header.is_empty() {
            self.anon += 1;
            format!("rule{}", self.anon)
        } else {
            header
        };

        let (select, mut pattern, where_clause, condition_form) = if self.eat_kw("condition") {
            self.expect(&Tok::Colon)?;
            let pattern = self.pattern()?;
            let where_clause = if self.eat_kw("where") { Some(self.expr()?) } else { None };
            (Vec::new(), pattern, where_clause, true)
        } else if self.eat_kw("select") {
            let select = self.select_list()?;
            self.expect_kw("from")?;
            let pattern = if self.eat_kw("pattern") {
                self.expect(&Tok::LBracket)?;
                let p = self.pattern()?;
                self.expect(&Tok::RBracket)?;
                p
            } else {
                self.pattern()?
            };
            let where_clause = if self.eat_kw("where") { Some(self.expr()?) } else { None };
            (select, pattern, where_clause, false)
        } else {
            return Err(self.unexpected("`CONDITION` or `SELECT`"));
        };

        self.expect_kw("action")?;
        self.expect(&Tok::Colon)?;
        let action = self.action()?;

        if condition_form && pattern.atoms().iter().all(|a| !a.every) {
            mark_leftmost_every(&mut pattern);
        }
        rewrite_filter_attributes(&mut pattern, &mut Vec::new());

        let kind = match action {
            Action::Forward(_) => RuleKind::Expectation,
            _ => RuleKind::Interpretation,
        };
        let rule = Rule {
            name,
            kind,
            select,
            pattern,
            where_clause,
            action,
        };
        self.check(&rule)?;
        Ok(rule)
    }

    fn select_list(&mut self) -> Result<Vec<SelectItem>, EplError> {
        if self.eat(&Tok::Star) {
            return Ok(Vec::new());
        }
        let mut items = Vec::new();
        loop {
            let pos = self.pos();
            let expr = self.expr()?;
            let alias = if self.eat_kw("as") {
                self.ident("output alias")?.0
            } else if let Expr::Path(p) = &expr {
                p.last().cloned().unwrap_or_default()
            } else {
                return Err(self.syntax_at(pos, "computed select item needs `as <alias>`".into()));
            };
            items.push(SelectItem { expr, alias });
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        Ok(items)
    }

    fn action(&mut self) -> Result<Action, EplError> {
        if self.eat_kw("forward") {
            let (alias, pos) = self.ident("alias")?;
            self.path_pos.entry(alias.clone()).or_insert(pos);
            return Ok(Action::Forward(alias));
        }
        if self.eat_kw("create") || self.eat_kw("new") {
            let event_type = self.event_type()?;
            let mut args = Vec::new();
            if self.eat(&Tok::LParen) {
                if !self.at(&Tok::RParen) {
                    loop {
                        let named = matches!(self.peek(), Tok::Ident(_)) && self.peek_at(1) == &Tok::Eq;
                        let name = if named {
                            let (n, _) = self.ident("attribute")?;
                            self.advance();
                            Some(n)
                        } else {
                            None
                        };
                        let value = self.expr()?;
                        args.push(EmitArg { name, value });
                        if !self.eat(&Tok::Comma) {
                            break;
                        }
                    }
                }
                self.expect(&Tok::RParen)?;
            }
            return Ok(Action::Emit { event_type, args });
        }
        if self.is_kw("bb") && self.peek_at(1) == &Tok::Dot {
            let pos = self.pos();
            self.advance();
            self.advance();
            let (op, _) = self.ident("`add` or `remove`")?;
            self.expect(&Tok::LParen)?;
            let arg = self.expr()?;
            self.expect(&Tok::RParen)?;
            let template =
                desugar_template(&arg).map_err(|m| EplError::new(EplErrorKind::InvalidBeliefTemplate(m), pos))?;
            return match op.as_str() {
                "add" => Ok(Action::AddBelief(template)),
                "remove" => Ok(Action::RemoveBelief(template)),
                other => Err(EplError::new(
                    EplErrorKind::InvalidAction(format!("unknown belief operation `{other}`")),
                    pos,
                )),
            };
        }
        Err(self.unexpected("`forward`, `create`, `new` or `BB.add`"))
    }

    // -- patterns -------------------------------------------------------------

    fn pattern(&mut self) -> Result<PatternNode, EplError> {
        let mut left = self.pat_or()?;
        while self.eat(&Tok::Arrow) {
            let right = self.pat_or()?;
            left = PatternNode::Seq(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn pat_or(&mut self) -> Result<PatternNode, EplError> {
        let mut left = self.pat_and()?;
        while self.eat_kw("or") {
            let right = self.pat_and()?;
            left = PatternNode::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn pat_and(&mut self) -> Result<PatternNode, EplError> {
        let start = self.pos();
        let mut ops = vec![self.pat_operand()?];
        while self.eat_kw("and") {
            ops.push(self.pat_operand()?);
        }
        self.combine_and(ops, start)
    }

    fn combine_and(&mut self, ops: Vec<Operand>, start: Pos) -> Result<PatternNode, EplError> {
        let invalid = |m: &str, p: Pos| EplError::new(EplErrorKind::InvalidPattern(m.into()), p);
        let has_timer = ops.iter().any(|o| matches!(o, Operand::Timer(..)));
        let has_not = ops.iter().any(|o| matches!(o, Operand::Not(..)));
        if has_timer || has_not {
            let mut duration = None;
            let mut absent = None;
            for op in ops {
                match op {
                    Operand::Timer(d, p) if duration.is_none() => duration = Some((d, p)),
                    Operand::Not(t, p) if absent.is_none() => absent = Some((t, p)),
                    Operand::Timer(_, p) | Operand::Not(_, p) => return Err(invalid("repeated timer or negation", p)),
                    Operand::Pat(_) | Operand::Filter(..) => {
                        return Err(invalid(
                            "`timer:interval(..) and not <Type>` cannot be combined with other terms",
                            start,
                        ))
                    }
                }
            }
            return match (duration, absent) {
                (Some((duration, _)), Some((absent, _))) => Ok(PatternNode::NotWithin { duration, absent }),
                (Some((_, p)), None) => Err(invalid("timer:interval needs `and not <Type>`", p)),
                (None, Some((_, p))) => Err(invalid("`not <Type>` needs a timer:interval", p)),
                (None, None) => unreachable!(),
            };
        }

        let mut pats = Vec::new();
        let mut filters = Vec::new();
        for op in ops {
            match op {
                Operand::Pat(p) => pats.push(p),
                Operand::Filter(e, p) => filters.push((e, p)),
                _ => unreachable!(),
            }
        }
        if pats.is_empty() {
            let p = filters.first().map(|f| f.1).unwrap_or(start);
            return Err(self.syntax_at(p, "expected an event pattern".into()));
        }
        for (filter, pos) in filters {
            attach_filter(&mut pats, filter).map_err(|m| invalid(&m, pos))?;
        }
        let mut it = pats.into_iter();
        let first = it.next().expect("non-empty");
        Ok(it.fold(first, |l, r| PatternNode::And(Box::new(l), Box::new(r))))
    }

    fn looks_like_pattern(&self) -> bool {
        let mut k = 0;
        while self.peek_at(k) == &Tok::LParen {
            k += 1;
        }
        if self.is_kw_at(k, "every") || self.is_kw_at(k, "not") {
            return true;
        }
        if self.is_kw_at(k, "timer") && self.peek_at(k + 1) == &Tok::Colon {
            return true;
        }
        self.atom_start_at(k)
    }

    fn atom_start_at(&self, k: usize) -> bool {
        match (self.peek_at(k), self.peek_at(k + 1), self.peek_at(k + 2)) {
            (Tok::Ident(a), Tok::Eq, Tok::Ident(t)) => {
                a.starts_with(|c: char| c.is_lowercase())
                    && t.starts_with(|c: char| c.is_uppercase())
                    && self.peek_at(k + 3) != &Tok::Dot
                    || matches!(
                        (self.peek_at(k), self.peek_at(k + 2), self.peek_at(k + 3), self.peek_at(k + 4)),
                        (Tok::Ident(_), Tok::Ident(t), Tok::Dot, Tok::Ident(w))
                            if t.starts_with(|c: char| c.is_uppercase()) && w == "window"
                    )
            }
            _ => false,
        }
    }

    fn pat_operand(&mut self) -> Result<Operand, EplError> {
        let pos = self.pos();
        if self.eat_kw("every") {
            let mut p = self.pat_postfix()?;
            if !set_every(&mut p) {
                return Err(EplError::new(
                    EplErrorKind::InvalidPattern("`every` must precede an event atom".into()),
                    pos,
                ));
            }
            return Ok(Operand::Pat(p));
        }
        if self.eat_kw("not") {
            let t = self.event_type()?;
            return Ok(Operand::Not(t, pos));
        }
        if self.is_kw("timer") && self.peek_at(1) == &Tok::Colon {
            self.advance();
            self.advance();
            self.expect_kw("interval")?;
            self.expect(&Tok::LParen)?;
            let d = self.expr()?;
            self.expect(&Tok::RParen)?;
            return Ok(Operand::Timer(d, pos));
        }
        if self.looks_like_pattern() {
            return Ok(Operand::Pat(self.pat_postfix()?));
        }
        let e = self.expr_cmp()?;
        Ok(Operand::Filter(e, pos))
    }

    fn pat_postfix(&mut self) -> Result<PatternNode, EplError> {
        let mut node = if self.at(&Tok::LParen) {
            self.advance();
            let p = self.pattern()?;
            self.expect(&Tok::RParen)?;
            p
        } else if self.atom_start_at(0) {
            PatternNode::Atom(self.atom()?)
        } else {
            return Err(self.unexpected("event pattern"));
        };
        while self.at(&Tok::Dot) && self.is_kw_at(1, "window") {
            self.advance();
            self.advance();
            self.expect(&Tok::Colon)?;
            let (kind, kpos) = self.ident("`time` or `time_batch`")?;
            self.expect(&Tok::LParen)?;
            let duration = self.expr()?;
            self.expect(&Tok::RParen)?;
            node = match kind.as_str() {
                "time" => PatternNode::TimeWindow {
                    child: Box::new(node),
                    duration,
                },
                "time_batch" => PatternNode::BatchWindow {
                    child: Box::new(node),
                    duration,
                },
                other => return Err(self.syntax_at(kpos, format!("unknown window kind `{other}`"))),
            };
        }
        Ok(node)
    }

    fn atom(&mut self) -> Result<Atom, EplError> {
        let (alias, pos) = self.ident("alias")?;
        if self.atom_pos.insert(alias.clone(), pos).is_some() {
            return Err(EplError::new(EplErrorKind::DuplicateAlias(alias), pos));
        }
        self.expect(&Tok::Eq)?;
        let event_type = self.event_type()?;
        let mut filter: Option<Expr> = None;
        if self.eat(&Tok::LParen) {
            loop {
                let e = self.expr()?;
                filter = Some(match filter {
                    Some(f) => f.and(e),
                    None => e,
                });
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(&Tok::RParen)?;
        }
        Ok(Atom {
            alias,
            event_type,
            filter,
            every: false,
        })
    }

    // -- expressions --------------------------------------------------------

    fn expr(&mut self) -> Result<Expr, EplError> {
        let mut left = self.expr_and()?;
        while self.eat_kw("or") {
            let r = self.expr_and()?;
            left = Expr::Binary(BinOp::Or, Box::new(left), Box::new(r));
        }
        Ok(left)
    }

    fn expr_and(&mut self) -> Result<Expr, EplError> {
        let mut left = self.expr_not()?;
        while self.eat_kw("and") {
            let r = self.expr_not()?;
            left = Expr::Binary(BinOp::And, Box::new(left), Box::new(r));
        }
        Ok(left)
    }

    fn expr_not(&mut self) -> Result<Expr, EplError> {
        if self.eat_kw("not") {
            let e = self.expr_not()?;
            return Ok(Expr::Unary(UnOp::Not, Box::new(e)));
        }
        self.expr_cmp()
    }

    fn expr_cmp(&mut self) -> Result<Expr, EplError> {
        let left = self.expr_add()?;
        let op = match self.peek() {
            Tok::Eq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(left),
        };
        self.advance();
        let right = self.expr_add()?;
        Ok(Expr::Binary(op, Box::new(left), Box::new(right)))
    }

    fn expr_add(&mut self) -> Result<Expr, EplError> {
        let mut left = self.expr_mul()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(left),
            };
            self.advance();
            let r = self.expr_mul()?;
            left = Expr::Binary(op, Box::new(left), Box::new(r));
        }
    }

    fn expr_mul(&mut self) -> Result<Expr, EplError> {
        let mut left = self.expr_unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(left),
            };
            self.advance();
            let r = self.expr_unary()?;
            left = Expr::Binary(op, Box::new(left), Box::new(r));
        }
    }

    fn expr_unary(&mut self) -> Result<Expr, EplError> {
        if self.eat(&Tok::Minus) {
            let e = self.expr_unary()?;
            return Ok(Expr::Unary(UnOp::Neg, Box::new(e)));
        }
        self.expr_primary()
    }

    fn unit(&mut self, value: f64, pos: Pos) -> Result<Option<Expr>, EplError> {
        let Tok::Ident(word) = self.peek().clone() else {
            return Ok(None);
        };
        let ms_factor = match word.as_str() {
            "ms" | "msec" | "millisecond" | "milliseconds" => Some(1.0),
            "sec" | "second" | "seconds" => Some(1_000.0),
            "min" | "minute" | "minutes" => Some(60_000.0),
            "hour" | "hours" => Some(3_600_000.0),
            _ => None,
        };
        if let Some(f) = ms_factor {
            self.advance();
            let ms = value * f;
            if ms.fract() != 0.0 || ms < 0.0 {
                return Err(self.syntax_at(pos, "duration must be a whole number of milliseconds".into()));
            }
            return Ok(Some(Expr::Duration(ms as u64)));
        }
        let m_factor = match word.as_str() {
            "meter" | "meters" | "metre" | "metres" => Some(1.0),
            "km" | "kilometer" | "kilometers" => Some(1_000.0),
            _ => None,
        };
        if let Some(f) = m_factor {
            self.advance();
            return Ok(Some(Expr::Distance(value * f)));
        }
        Ok(None)
    }

    fn expr_primary(&mut self) -> Result<Expr, EplError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Int(i) => {
                self.advance();
                Ok(self.unit(i as f64, pos)?.unwrap_or(Expr::Int(i)))
            }
            Tok::Num(x) => {
                self.advance();
                Ok(self.unit(x, pos)?.unwrap_or(Expr::Num(x)))
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr::Str(s))
            }
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(id) => {
                let lower = id.to_ascii_lowercase();
                if lower == "true" || lower == "false" {
                    self.advance();
                    return Ok(Expr::Bool(lower == "true"));
                }
                if RESERVED.contains(&lower.as_str()) {
                    return Err(self.unexpected("expression"));
                }
                self.advance();
                let mut parts = vec![id];
                while self.at(&Tok::Dot) && matches!(self.peek_at(1), Tok::Ident(_)) {
                    self.advance();
                    parts.push(self.ident("attribute")?.0);
                }
                if self.at(&Tok::LParen) {
                    self.advance();
                    let mut args = Vec::new();
                    if !self.at(&Tok::RParen) {
                        loop {
                            args.push(self.expr()?);
                            if !self.eat(&Tok::Comma) {
                                break;
                            }
                        }
                    }
                    self.expect(&Tok::RParen)?;
                    return self.call(parts, args, pos);
                }
                self.path_pos.entry(parts[0].clone()).or_insert(pos);
                Ok(Expr::Path(parts))
            }
            _ => Err(self.unexpected("expression")),
        }
    }

    fn call(&mut self, parts: Vec<String>, mut args: Vec<Expr>, pos: Pos) -> Result<Expr, EplError> {
        if parts.len() == 1 {
            if let Some(func) = AggFunc::from_name(&parts[0]) {
                if args.len() != 1 || !matches!(args[0], Expr::Path(_)) {
                    return Err(self.syntax_at(pos, format!("{}() takes one attribute path", parts[0])));
                }
                return Ok(Expr::Aggregate {
                    func,
                    arg: Box::new(args.remove(0)),
                });
            }
        }
        if parts.len() == 2 && parts[0] == "BB" {
            let op = match parts[1].as_str() {
                "contains" => BeliefOp::Contains,
                "get" => BeliefOp::Get,
                other => {
                    return Err(EplError::new(
                        EplErrorKind::InvalidBeliefTemplate(format!("`BB.{other}` is not available in expressions")),
                        pos,
                    ))
                }
            };
            if args.len() != 1 {
                return Err(self.syntax_at(pos, format!("BB.{} takes one literal", parts[1])));
            }
            let template =
                desugar_template(&args[0]).map_err(|m| EplError::new(EplErrorKind::InvalidBeliefTemplate(m), pos))?;
            if op == BeliefOp::Get && template.variables().len() != 1 {
                return Err(EplError::new(
                    EplErrorKind::InvalidBeliefTemplate("BB.get needs exactly one unbound variable".into()),
                    pos,
                ));
            }
            return Ok(Expr::Belief { op, template });
        }
        Ok(Expr::Call {
            service: parts.join("."),
            args,
        })
    }

    // -- validation ---------------------------------------------------------

    fn ref_pos(&self, alias: &str) -> Pos {
        self.path_pos.get(alias).copied().unwrap_or(self.rule_pos)
    }

    fn check(&self, rule: &Rule) -> Result<(), EplError> {
        let aliases = rule.aliases();
        let at = |kind: EplErrorKind, pos: Pos| EplError::new(kind, pos);

        // Filters may only see aliases bound before them (or their own).
        let mut bound: Vec<&str> = Vec::new();
        for atom in rule.pattern.atoms() {
            bound.push(&atom.alias);
            if let Some(f) = &atom.filter {
                for a in f.aliases() {
                    if !aliases.contains(&a) {
                        return Err(at(EplErrorKind::UnboundAlias(a.into()), self.ref_pos(a)));
                    }
                }
            }
        }
        check_durations(&rule.pattern, false).map_err(|m| at(EplErrorKind::InvalidPattern(m), self.rule_pos))?;

        let mut exprs: Vec<&Expr> = rule.select.iter().map(|s| &s.expr).collect();
        if let Some(w) = &rule.where_clause {
            exprs.push(w);
        }
        for e in &exprs {
            for a in e.aliases() {
                if !aliases.contains(&a) {
                    return Err(at(EplErrorKind::UnboundAlias(a.into()), self.ref_pos(a)));
                }
            }
        }
        let outputs: Vec<&str> = rule.select.iter().map(|s| s.alias.as_str()).collect();
        let action_ok = |a: &str| aliases.contains(&a) || outputs.contains(&a);
        let mut action_exprs: Vec<&Expr> = Vec::new();
        match &rule.action {
            Action::Forward(a) => {
                if !aliases.contains(&a.as_str()) {
                    return Err(at(EplErrorKind::UnboundAlias(a.clone()), self.ref_pos(a)));
                }
            }
            Action::Emit { event_type, args } => {
                let schema = self.registry.schema(event_type).expect("resolved at parse");
                if args.len() > schema.attributes.len() {
                    return Err(at(
                        EplErrorKind::InvalidAction(format!(
                            "{event_type} has {} attributes, {} given",
                            schema.attributes.len(),
                            args.len()
                        )),
                        self.rule_pos,
                    ));
                }
                let mut seen = Vec::new();
                for arg in args {
                    if let Some(n) = &arg.name {
                        if schema.attribute(n).is_none() || seen.contains(&n) {
                            return Err(at(
                                EplErrorKind::InvalidAction(format!(
                                    "bad or repeated attribute `{n}` for {event_type}"
                                )),
                                self.rule_pos,
                            ));
                        }
                        seen.push(n);
                    }
                    action_exprs.push(&arg.value);
                }
            }
            Action::AddBelief(t) | Action::RemoveBelief(t) => {
                for arg in &t.args {
                    if let TemplateArg::Hole(e) = arg {
                        action_exprs.push(e);
                    }
                }
            }
        }
        for e in &action_exprs {
            for a in e.aliases() {
                if !action_ok(a) {
                    return Err(at(EplErrorKind::UnboundAlias(a.into()), self.ref_pos(a)));
                }
            }
        }

        let windowed = windowed_aliases(&rule.pattern);
        let mut all: Vec<&Expr> = exprs.clone();
        all.extend(action_exprs.iter().copied());
        for e in &all {
            let mut err = None;
            visit_aggregates(e, &mut |arg| {
                if let Expr::Path(p) = arg {
                    if p.len() != 2 || !windowed.contains(&p[0].as_str()) {
                        err.get_or_insert_with(|| p.join("."));
                    }
                }
            });
            if let Some(p) = err {
                let head = p.split('.').next().unwrap_or_default().to_owned();
                return Err(at(EplErrorKind::AggregateOutsideWindow(p), self.ref_pos(&head)));
            }
        }

        if let Action::Forward(fwd) = &rule.action {
            let atoms = rule.pattern.atoms();
            let guarded = atoms.iter().find(|a| &a.alias == fwd).map(|a| a.event_type.as_str());
            for e in &all {
                let mut bad = None;
                visit_aggregates(e, &mut |arg| {
                    if let Expr::Path(p) = arg {
                        let ty = atoms.iter().find(|a| a.alias == p[0]).map(|a| a.event_type.as_str());
                        if ty == guarded {
                            bad.get_or_insert_with(|| p.join("."));
                        }
                    }
                });
                if let Some(p) = bad {
                    return Err(at(EplErrorKind::ExpectationFeedback(p), self.rule_pos));
                }
            }
        }
        Ok(())
    }
}

fn check_durations(node: &PatternNode, in_seq_rhs: bool) -> Result<(), String> {
    let positive = |d: &Expr| match d {
        Expr::Duration(0) => Err("durations must be positive".to_owned()),
        Expr::Int(i) if *i <= 0 => Err("durations must be positive".to_owned()),
        Expr::Num(x) if *x <= 0.0 => Err("durations must be positive".to_owned()),
        _ => Ok(()),
    };
    match node {
        PatternNode::Atom(_) => Ok(()),
        PatternNode::Seq(l, r) => {
            check_durations(l, in_seq_rhs)?;
            check_durations(r, true)
        }
        PatternNode::And(l, r) => {
            if !matches!(**l, PatternNode::Atom(_) | PatternNode::And(..)) || !matches!(**r, PatternNode::Atom(_)) {
                return Err("`and` combines event atoms only".into());
            }
            Ok(())
        }
        PatternNode::Or(l, r) => {
            check_durations(l, in_seq_rhs)?;
            check_durations(r, in_seq_rhs)
        }
        PatternNode::NotWithin { duration, .. } => {
            if !in_seq_rhs {
                return Err("timer:interval must follow `->`".into());
            }
            positive(duration)
        }
        PatternNode::TimeWindow { child, duration } => {
            positive(duration)?;
            check_durations(child, in_seq_rhs)
        }
        PatternNode::BatchWindow { child, duration } => {
            if !matches!(duration, Expr::Duration(d) if *d > 0) {
                return Err("batch windows need a positive constant duration".into());
            }
            if !matches!(**child, PatternNode::Atom(_)) {
                return Err("batch windows apply to a single event atom".into());
            }
            Ok(())
        }
    }
}

fn windowed_aliases(node: &PatternNode) -> Vec<&str> {
    let mut out = Vec::new();
    fn walk<'a>(n: &'a PatternNode, out: &mut Vec<&'a str>) {
        match n {
            PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => {
                if let PatternNode::Atom(a) = &**child {
                    out.push(&a.alias);
                }
                walk(child, out);
            }
            PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
                walk(l, out);
                walk(r, out);
            }
            _ => {}
        }
    }
    walk(node, &mut out);
    out
}

fn visit_aggregates<'a>(e: &'a Expr, f: &mut impl FnMut(&'a Expr)) {
    match e {
        Expr::Aggregate { arg, .. } => f(arg),
        Expr::Unary(_, x) => visit_aggregates(x, f),
        Expr::Binary(_, l, r) => {
            visit_aggregates(l, f);
            visit_aggregates(r, f);
        }
        Expr::Call { args, .. } => args.iter().for_each(|a| visit_aggregates(a, f)),
        _ => {}
    }
}

fn set_every(node: &mut PatternNode) -> bool {
    match node {
        PatternNode::Atom(a) => {
            a.every = true;
            true
        }
        PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => set_every(child),
        _ => false,
    }
}

fn mark_leftmost_every(node: &mut PatternNode) {
    match node {
        PatternNode::Atom(a) => a.every = true,
        PatternNode::Seq(l, _) | PatternNode::And(l, _) => mark_leftmost_every(l),
        PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => mark_leftmost_every(child),
        PatternNode::Or(..) | PatternNode::NotWithin { .. } => {}
    }
}

/// Inside an atom's filter a bare name that is not an alias bound so far
/// refers to an attribute of the atom's own event.
fn rewrite_filter_attributes(node: &mut PatternNode, bound: &mut Vec<String>) {
    match node {
        PatternNode::Atom(a) => {
            bound.push(a.alias.clone());
            if let Some(f) = &mut a.filter {
                rewrite_bare(f, &a.alias, bound);
            }
        }
        PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
            rewrite_filter_attributes(l, bound);
            rewrite_filter_attributes(r, bound);
        }
        PatternNode::NotWithin { .. } => {}
        PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => {
            rewrite_filter_attributes(child, bound)
        }
    }
}

fn rewrite_bare(e: &mut Expr, own: &str, bound: &[String]) {
    match e {
        Expr::Path(p) if p.len() == 1 && !bound.iter().any(|b| b == &p[0]) => {
            p.insert(0, own.to_owned());
        }
        Expr::Unary(_, x) => rewrite_bare(x, own, bound),
        Expr::Binary(_, l, r) => {
            rewrite_bare(l, own, bound);
            rewrite_bare(r, own, bound);
        }
        Expr::Call { args, .. } => args.iter_mut().for_each(|a| rewrite_bare(a, own, bound)),
        Expr::Aggregate { arg, .. } => rewrite_bare(arg, own, bound),
        Expr::Belief { template, .. } => {
            for a in &mut template.args {
                if let TemplateArg::Hole(h) = a {
                    rewrite_bare(h, own, bound);
                }
            }
        }
        _ => {}
    }
}

/// Attaches a trailing boolean term of an `and` chain to the atom binding
/// the latest alias it references, or to the chain's last atom.
fn attach_filter(pats: &mut [PatternNode], filter: Expr) -> Result<(), String> {
    let refs = filter.aliases();
    let mut target: Option<(usize, String)> = None;
    let mut last: Option<(usize, String)> = None;
    for (i, p) in pats.iter().enumerate() {
        for a in p.atoms() {
            last = Some((i, a.alias.clone()));
            if refs.contains(&a.alias.as_str()) {
                target = Some((i, a.alias.clone()));
            }
        }
    }
    let (idx, alias) = target
        .or(last)
        .ok_or_else(|| "filter term has no event atom to attach to".to_owned())?;
    fn find<'a>(n: &'a mut PatternNode, alias: &str) -> Option<&'a mut Atom> {
        match n {
            PatternNode::Atom(a) if a.alias == alias => Some(a),
            PatternNode::Atom(_) | PatternNode::NotWithin { .. } => None,
            PatternNode::Seq(l, r) | PatternNode::And(l, r) | PatternNode::Or(l, r) => {
                find(l, alias).or_else(|| find(r, alias))
            }
            PatternNode::TimeWindow { child, .. } | PatternNode::BatchWindow { child, .. } => find(child, alias),
        }
    }
    let atom = find(&mut pats[idx], &alias).expect("atom located above");
    atom.filter = Some(match atom.filter.take() {
        Some(f) => f.and(filter),
        None => filter,
    });
    Ok(())
}

// -- belief templates ------------------------------------------------------

enum Piece {
    Text(String),
    Hole(Expr),
}

fn flatten_concat(e: &Expr, out: &mut Vec<Piece>) {
    match e {
        Expr::Binary(BinOp::Add, l, r) => {
            flatten_concat(l, out);
            flatten_concat(r, out);
        }
        Expr::Str(s) => out.push(Piece::Text(s.clone())),
        other => out.push(Piece::Hole(other.clone())),
    }
}

#[derive(Debug)]
enum TTok {
    Word(String),
    Num(f64),
    Quoted(String),
    LParen,
    RParen,
    Comma,
    Hole(Expr),
}

/// Turns `"f(" + x.id + ", Lat, _)"` into a literal template.
pub(crate) fn desugar_template(e: &Expr) -> Result<LiteralTemplate, String> {
    let mut pieces = Vec::new();
    flatten_concat(e, &mut pieces);
    let mut toks = Vec::new();
    for piece in pieces {
        match piece {
            Piece::Hole(h) => toks.push(TTok::Hole(h)),
            Piece::Text(s) => {
                let chars: Vec<char> = s.chars().collect();
                let mut i = 0;
                while i < chars.len() {
                    let c = chars[i];
                    match c {
                        c if c.is_whitespace() => i += 1,
                        '(' => {
                            toks.push(TTok::LParen);
                            i += 1
                        }
                        ')' => {
                            toks.push(TTok::RParen);
                            i += 1
                        }
                        ',' => {
                            toks.push(TTok::Comma);
                            i += 1
                        }
                        '"' | '\'' => {
                            let q = c;
                            i += 1;
                            let mut s = String::new();
                            while i < chars.len() && chars[i] != q {
                                if chars[i] == '\\' && i + 1 < chars.len() {
                                    i += 1;
                                }
                                s.push(chars[i]);
                                i += 1;
                            }
                            if i >= chars.len() {
                                return Err("unterminated quoted argument".into());
                            }
                            i += 1;
                            toks.push(TTok::Quoted(s));
                        }
                        c if c == '-' || c.is_ascii_digit() => {
                            let start = i;
                            i += 1;
                            while i < chars.len() && (chars[i].is_ascii_digit() || matches!(chars[i], '.' | 'e' | 'E'))
                            {
                                i += 1;
                            }
                            let text: String = chars[start..i].iter().collect();
                            toks.push(TTok::Num(text.parse().map_err(|_| format!("bad number `{text}`"))?));
                        }
                        c if c.is_alphanumeric() || c == '_' => {
                            let start = i;
                            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                                i += 1;
                            }
                            toks.push(TTok::Word(chars[start..i].iter().collect()));
                        }
                        other => return Err(format!("unexpected `{other}` in literal")),
                    }
                }
            }
        }
    }

    let mut it = toks.into_iter().peekable();
    let functor = match it.next() {
        Some(TTok::Word(w)) => w,
        _ => return Err("literal must start with a functor name".into()),
    };
    let mut args = Vec::new();
    if matches!(it.peek(), Some(TTok::LParen)) {
        it.next();
        loop {
            let arg = match it.next() {
                Some(TTok::Hole(h)) => TemplateArg::Hole(h),
                Some(TTok::Num(x)) => TemplateArg::Term(Term::Const(Constant::Num(x))),
                Some(TTok::Quoted(s)) => TemplateArg::Term(Term::Const(Constant::Atom(s))),
                Some(TTok::Word(w)) if w == "_" => TemplateArg::Term(Term::Placeholder),
                Some(TTok::Word(w)) if w.starts_with(|c: char| c.is_uppercase() || c == '_') => {
                    TemplateArg::Term(Term::Var(w))
                }
                Some(TTok::Word(w)) => TemplateArg::Term(Term::Const(Constant::Atom(w))),
                _ => return Err("expected literal argument".into()),
            };
            args.push(arg);
            match it.next() {
                Some(TTok::Comma) => continue,
                Some(TTok::RParen) => break,
                _ => return Err("expected `,` or `)` in literal".into()),
            }
        }
    }
    if it.next().is_some() {
        return Err("trailing input after literal".into());
    }
    Ok(LiteralTemplate { functor, args })
}
