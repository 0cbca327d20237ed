//! Agent belief base: ground literals with optional expiry.
//!
//! Queries are literal patterns whose arguments may be constants, `_`
//! placeholders or capitalized variables, e.g. `hasParcel(p1, Lat, _)`.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::event::Timestamp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("belief `{0}` is not ground")]
    NonGroundBelief(String),
    #[error("no belief matches `{0}`")]
    NoMatch(String),
    #[error("query `{0}` must contain exactly one variable")]
    NotSingleVariable(String),
    #[error("cannot parse literal `{text}`: {reason}")]
    Parse { text: String, reason: String },
}

/// Ground argument of a belief.
#[derive(Debug, Clone, PartialEq)]
pub enum Constant {
    Num(f64),
    Atom(String),
}

impl Constant {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Constant::Num(x) => Some(*x),
            Constant::Atom(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Constant::Atom(s) => Some(s),
            Constant::Num(_) => None,
        }
    }
}

fn is_bare_atom(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase()) && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constant::Num(x) => write!(f, "{x}"),
            Constant::Atom(s) if is_bare_atom(s) => f.write_str(s),
            Constant::Atom(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<f64> for Constant {
    fn from(x: f64) -> Self {
        Constant::Num(x)
    }
}

impl From<&str> for Constant {
    fn from(s: &str) -> Self {
        Constant::Atom(s.to_owned())
    }
}

impl From<String> for Constant {
    fn from(s: String) -> Self {
        Constant::Atom(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Const(Constant),
    Placeholder,
    Var(String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Const(c) => c.fmt(f),
            Term::Placeholder => f.write_str("_"),
            Term::Var(v) => f.write_str(v),
        }
    }
}

/// Variable bindings produced by unification.
pub type Bindings = BTreeMap<String, Constant>;

/// A literal pattern. Ground queries double as belief literals.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefQuery {
    pub functor: String,
    pub args: Vec<Term>,
}

impl BeliefQuery {
    pub fn new(functor: &str, args: Vec<Term>) -> Self {
        Self {
            functor: functor.to_owned(),
            args,
        }
    }

    pub fn ground(functor: &str, args: Vec<Constant>) -> Self {
        Self::new(functor, args.into_iter().map(Term::Const).collect())
    }

    pub fn parse(text: &str) -> Result<Self, BeliefError> {
        LiteralParser::new(text).parse()
    }

    pub fn variables(&self) -> Vec<&str> {
        let mut vars = Vec::new();
        for a in &self.args {
            if let Term::Var(v) = a {
                if !vars.contains(&v.as_str()) {
                    vars.push(v.as_str());
                }
            }
        }
        vars
    }

    pub fn is_ground(&self) -> bool {
        self.args.iter().all(|a| matches!(a, Term::Const(_)))
    }

    /// Replaces bound variables by their values.
    pub fn substitute(&self, bindings: &Bindings) -> BeliefQuery {
        let args = self
            .args
            .iter()
            .map(|a| match a {
                Term::Var(v) => bindings
                    .get(v)
                    .map(|c| Term::Const(c.clone()))
                    .unwrap_or_else(|| a.clone()),
                other => other.clone(),
            })
            .collect();
        BeliefQuery {
            functor: self.functor.clone(),
            args,
        }
    }

    /// Unifies this pattern with a ground belief, extending `bindings`.
    pub fn unify(&self, belief: &Belief, bindings: &Bindings) -> Option<Bindings> {
        if self.functor != belief.functor || self.args.len() != belief.args.len() {
            return None;
        }
        let mut out = bindings.clone();
        for (term, value) in self.args.iter().zip(&belief.args) {
            match term {
                Term::Placeholder => {}
                Term::Const(c) => {
                    if c != value {
                        return None;
                    }
                }
                Term::Var(v) => match out.get(v) {
                    Some(bound) if bound != value => return None,
                    Some(_) => {}
                    None => {
                        out.insert(v.clone(), value.clone());
                    }
                },
            }
        }
        Some(out)
    }

    fn into_ground_args(self) -> Result<(String, Vec<Constant>), BeliefError> {
        if !self.is_ground() {
            return Err(BeliefError::NonGroundBelief(self.to_string()));
        }
        let args = self
            .args
            .into_iter()
            .map(|t| match t {
                Term::Const(c) => c,
                _ => unreachable!("checked ground"),
            })
            .collect();
        Ok((self.functor, args))
    }
}

impl fmt::Display for BeliefQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.functor)?;
        if !self.args.is_empty() {
            f.write_str("(")?;
            for (i, a) in self.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                a.fmt(f)?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

struct LiteralParser<'a> {
    text: &'a str,
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
}

impl<'a> LiteralParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            chars: text.char_indices().peekable(),
        }
    }

    fn err(&self, reason: impl Into<String>) -> BeliefError {
        BeliefError::Parse {
            text: self.text.to_owned(),
            reason: reason.into(),
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.chars.peek(), Some((_, c)) if c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn ident(&mut self) -> String {
        let mut s = String::new();
        while let Some(&(_, c)) = self.chars.peek() {
            if c.is_alphanumeric() || c == '_' {
                s.push(c);
                self.chars.next();
            } else {
                break;
            }
        }
        s
    }

    fn parse(mut self) -> Result<BeliefQuery, BeliefError> {
        self.skip_ws();
        let functor = self.ident();
        if functor.is_empty() || functor.starts_with(|c: char| c.is_ascii_digit()) {
            return Err(self.err("expected functor"));
        }
        self.skip_ws();
        let mut args = Vec::new();
        if let Some((_, '(')) = self.chars.peek() {
            self.chars.next();
            loop {
                self.skip_ws();
                args.push(self.term()?);
                self.skip_ws();
                match self.chars.next() {
                    Some((_, ',')) => continue,
                    Some((_, ')')) => break,
                    _ => return Err(self.err("expected `,` or `)`")),
                }
            }
        }
        self.skip_ws();
        if self.chars.next().is_some() {
            return Err(self.err("trailing input"));
        }
        Ok(BeliefQuery { functor, args })
    }

    fn term(&mut self) -> Result<Term, BeliefError> {
        match self.chars.peek().copied() {
            Some((_, q @ ('"' | '\''))) => {
                self.chars.next();
                let mut s = String::new();
                loop {
                    match self.chars.next() {
                        Some((_, '\\')) => match self.chars.next() {
                            Some((_, c)) => s.push(c),
                            None => return Err(self.err("unterminated string")),
                        },
                        Some((_, c)) if c == q => break,
                        Some((_, c)) => s.push(c),
                        None => return Err(self.err("unterminated string")),
                    }
                }
                Ok(Term::Const(Constant::Atom(s)))
            }
            Some((start, c)) if c == '-' || c.is_ascii_digit() => {
                self.chars.next();
                let mut end = start + c.len_utf8();
                while let Some(&(i, c)) = self.chars.peek() {
                    if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' {
                        end = i + 1;
                        self.chars.next();
                    } else {
                        break;
                    }
                }
                self.text[start..end]
                    .parse::<f64>()
                    .map(|x| Term::Const(Constant::Num(x)))
                    .map_err(|_| self.err("bad number"))
            }
            Some((_, _)) => {
                let id = self.ident();
                if id.is_empty() {
                    return Err(self.err("expected term"));
                }
                if id == "_" {
                    Ok(Term::Placeholder)
                } else if id.starts_with(|c: char| c.is_uppercase() || c == '_') {
                    Ok(Term::Var(id))
                } else {
                    Ok(Term::Const(Constant::Atom(id)))
                }
            }
            None => Err(self.err("expected term")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub functor: String,
    pub args: Vec<Constant>,
    pub added_at: Timestamp,
    pub expires_at: Option<Timestamp>,
}

impl Belief {
    pub fn literal(&self) -> BeliefQuery {
        BeliefQuery::ground(&self.functor, self.args.clone())
    }

    fn key(&self) -> String {
        self.literal().to_string()
    }
}

impl fmt::Display for Belief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.literal().fmt(f)
    }
}

/// A state change of the base, consumed as a plan trigger.
#[derive(Debug, Clone, PartialEq)]
pub enum BeliefChange {
    Added(Belief),
    Removed(Belief),
}

impl BeliefChange {
    pub fn belief(&self) -> &Belief {
        match self {
            BeliefChange::Added(b) | BeliefChange::Removed(b) => b,
        }
    }
}

impl fmt::Display for BeliefChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeliefChange::Added(b) => write!(f, "+{b}"),
            BeliefChange::Removed(b) => write!(f, "-{b}"),
        }
    }
}

/// Insertion-ordered store of unique ground beliefs.
#[derive(Debug, Clone, Default)]
pub struct BeliefBase {
    beliefs: IndexMap<String, Belief>,
}

impl BeliefBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Belief> {
        self.beliefs.values()
    }

    /// Adds a ground literal. Returns `None` when the literal is already held.
    pub fn add(
        &mut self,
        literal: BeliefQuery,
        now: Timestamp,
        expires_at: Option<Timestamp>,
    ) -> Result<Option<BeliefChange>, BeliefError> {
        let (functor, args) = literal.into_ground_args()?;
        let belief = Belief {
            functor,
            args,
            added_at: now,
            expires_at,
        };
        let key = belief.key();
        if self.beliefs.contains_key(&key) {
            return Ok(None);
        }
        self.beliefs.insert(key, belief.clone());
        Ok(Some(BeliefChange::Added(belief)))
    }

    /// Parses `text` and adds it without expiry.
    pub fn add_text(&mut self, text: &str, now: Timestamp) -> Result<Option<BeliefChange>, BeliefError> {
        self.add(BeliefQuery::parse(text)?, now, None)
    }

    /// Removes every belief unifying with `query`.
    pub fn remove(&mut self, query: &BeliefQuery) -> Vec<BeliefChange> {
        let empty = Bindings::new();
        let mut removed = Vec::new();
        self.beliefs.retain(|_, b| {
            if query.unify(b, &empty).is_some() {
                removed.push(BeliefChange::Removed(b.clone()));
                false
            } else {
                true
            }
        });
        removed
    }

    pub fn contains(&self, query: &BeliefQuery) -> bool {
        let empty = Bindings::new();
        self.beliefs.values().any(|b| query.unify(b, &empty).is_some())
    }

    /// All matches in insertion order, with their bindings.
    pub fn query<'a>(
        &'a self,
        query: &'a BeliefQuery,
        bindings: &'a Bindings,
    ) -> impl Iterator<Item = (&'a Belief, Bindings)> + 'a {
        self.beliefs
            .values()
            .filter_map(move |b| query.unify(b, bindings).map(|bs| (b, bs)))
    }

    /// Value of the single variable in `query` from the first match.
    pub fn get(&self, query: &BeliefQuery) -> Result<Constant, BeliefError> {
        let vars = query.variables();
        let [var] = vars.as_slice() else {
            return Err(BeliefError::NotSingleVariable(query.to_string()));
        };
        let empty = Bindings::new();
        let found = self.query(query, &empty).next().map(|(_, bs)| bs);
        found
            .and_then(|mut bs| bs.remove(*var))
            .ok_or_else(|| BeliefError::NoMatch(query.to_string()))
    }

    /// Drops every belief whose expiry is at or before `now`.
    pub fn expire(&mut self, now: Timestamp) -> Vec<BeliefChange> {
        let mut removed = Vec::new();
        self.beliefs.retain(|_, b| match b.expires_at {
            Some(t) if t <= now => {
                removed.push(BeliefChange::Removed(b.clone()));
                false
            }
            _ => true,
        });
        removed
    }

    /// One belief per line, in insertion order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for b in self.beliefs.values() {
            let exp = b.expires_at.map(|t| t.to_string()).unwrap_or_else(|| "never".into());
            out.push_str(&format!("{b} [expires={exp}]\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(s: &str) -> BeliefQuery {
        BeliefQuery::parse(s).unwrap()
    }

    #[test]
    fn add_notifies_once() {
        let mut bb = BeliefBase::new();
        let first = bb.add(q("hasParcel(p1, 52.38, 9.74)"), 0, None).unwrap();
        assert_eq!(first.unwrap().to_string(), "+hasParcel(p1,52.38,9.74)");
        assert_eq!(bb.add(q("hasParcel(p1, 52.38, 9.74)"), 5, None).unwrap(), None);
        assert_eq!(bb.len(), 1);
    }

    #[test]
    fn non_ground_add_is_rejected() {
        let mut bb = BeliefBase::new();
        assert!(matches!(
            bb.add(q("f(X)"), 0, None),
            Err(BeliefError::NonGroundBelief(_))
        ));
        assert!(matches!(
            bb.add(q("f(_)"), 0, None),
            Err(BeliefError::NonGroundBelief(_))
        ));
    }

    #[test]
    fn remove_by_pattern() {
        let mut bb = BeliefBase::new();
        bb.add_text("hasParcel(p1, 52.38, 9.74)", 0).unwrap();
        assert_eq!(bb.remove(&q("hasParcel(p2,_,_)")), vec![]);
        assert_eq!(bb.remove(&q("hasParcel(p1,_,_)")).len(), 1);
        assert!(bb.is_empty());
    }

    #[test]
    fn contains_with_placeholders() {
        let mut bb = BeliefBase::new();
        assert!(!bb.contains(&q("temperature(_)")));
        bb.add_text("temperature(20)", 0).unwrap();
        bb.add_text("isCycling", 0).unwrap();
        assert!(bb.contains(&q("temperature(_)")));
        assert!(bb.contains(&q("isCycling")));
        assert!(!bb.contains(&q("temperature(21)")));
    }

    #[test]
    fn get_returns_first_binding() {
        let mut bb = BeliefBase::new();
        assert!(matches!(bb.get(&q("temperature(Var)")), Err(BeliefError::NoMatch(_))));
        bb.add_text("temperature(20)", 0).unwrap();
        bb.add_text("temperature(25)", 1).unwrap();
        assert_eq!(bb.get(&q("temperature(Var)")).unwrap(), Constant::Num(20.0));
        bb.add_text("hasParcel(p1, 52.38, 9.74)", 0).unwrap();
        assert_eq!(bb.get(&q("hasParcel(p1, Lat, _)")).unwrap(), Constant::Num(52.38));
        assert_eq!(bb.get(&q("hasParcel(p1, _, Lon)")).unwrap(), Constant::Num(9.74));
        assert!(matches!(
            bb.get(&q("hasParcel(A, B, _)")),
            Err(BeliefError::NotSingleVariable(_))
        ));
    }

    #[test]
    fn expiry_boundary_is_inclusive() {
        let mut bb = BeliefBase::new();
        bb.add(q("auctionOpen(a1)"), 0, Some(5000)).unwrap();
        assert!(bb.expire(4999).is_empty());
        let gone = bb.expire(5000);
        assert_eq!(gone.len(), 1);
        assert!(matches!(gone[0], BeliefChange::Removed(_)));
        assert!(bb.expire(6000).is_empty());
    }

    #[test]
    fn repeated_variables_must_agree() {
        let mut bb = BeliefBase::new();
        bb.add_text("pair(a, b)", 0).unwrap();
        bb.add_text("pair(c, c)", 0).unwrap();
        let hits: Vec<_> = bb
            .query(&q("pair(X, X)"), &Bindings::new())
            .map(|(b, _)| b.to_string())
            .collect();
        assert_eq!(hits, vec!["pair(c,c)"]);
    }

    #[test]
    fn dump_format() {
        let mut bb = BeliefBase::new();
        bb.add_text("isCycling", 0).unwrap();
        bb.add(q("hasParcel(\"parcel 7\", 1.5, -2)"), 3, Some(90)).unwrap();
        assert_eq!(
            bb.dump(),
            "isCycling [expires=never]\nhasParcel(\"parcel 7\",1.5,-2) [expires=90]\n"
        );
    }

    #[test]
    fn capitalized_constants_survive_quoting() {
        let lit = BeliefQuery::ground("SlowDeliveryProgress", vec!["P1".into()]);
        let text = lit.to_string();
        assert_eq!(text, "SlowDeliveryProgress(\"P1\")");
        assert_eq!(BeliefQuery::parse(&text).unwrap(), lit);
    }

    fn arb_const() -> impl Strategy<Value = Constant> {
        prop_oneof![
            (0u8..4).prop_map(|i| Constant::Num(f64::from(i))),
            prop::sample::select(vec!["a", "b", "c"]).prop_map(Constant::from),
        ]
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        prop_oneof![
            arb_const().prop_map(Term::Const),
            Just(Term::Placeholder),
            Just(Term::Var("X".into())),
        ]
    }

    proptest! {
        #[test]
        fn contains_iff_remove_nonempty_and_get_consistent(
            beliefs in prop::collection::vec(prop::collection::vec(arb_const(), 2), 0..8),
            pattern in prop::collection::vec(arb_term(), 2),
        ) {
            let mut bb = BeliefBase::new();
            for args in beliefs {
                bb.add(BeliefQuery::ground("f", args), 0, None).unwrap();
            }
            let query = BeliefQuery::new("f", pattern);
            let contains = bb.contains(&query);
            if query.variables().len() == 1 && bb.get(&query).is_ok() {
                prop_assert!(contains);
            }
            let mut snapshot = bb.clone();
            prop_assert_eq!(contains, !snapshot.remove(&query).is_empty());
        }
    }
}
