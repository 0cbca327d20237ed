//! Expression evaluation against a partial match.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::belief::{BeliefBase, BeliefQuery, Constant};
use crate::epl::{AggFunc, BeliefOp, BinOp, Expr, LiteralTemplate, UnOp};
use crate::event::{Event, GeoPoint, Timestamp, Value};
use crate::geo;

use super::EngineError;

/// Runtime value of an expression.
#[derive(Debug, Clone)]
pub enum EvalValue {
    Num(f64),
    Text(String),
    Bool(bool),
    Geo(GeoPoint),
    /// A bound event, as produced by a bare alias.
    Event(Arc<Event>),
}

impl EvalValue {
    fn type_name(&self) -> &'static str {
        match self {
            EvalValue::Num(_) => "number",
            EvalValue::Text(_) => "text",
            EvalValue::Bool(_) => "boolean",
            EvalValue::Geo(_) => "geo-point",
            EvalValue::Event(_) => "event",
        }
    }

    pub fn as_num(&self) -> Result<f64, String> {
        match self {
            EvalValue::Num(x) => Ok(*x),
            other => Err(format!("expected number, got {}", other.type_name())),
        }
    }

    pub fn as_bool(&self) -> Result<bool, String> {
        match self {
            EvalValue::Bool(b) => Ok(*b),
            other => Err(format!("expected boolean, got {}", other.type_name())),
        }
    }

    /// Position carried by a geo value or a located event.
    pub fn as_geo(&self) -> Result<GeoPoint, String> {
        match self {
            EvalValue::Geo(g) => Ok(*g),
            EvalValue::Event(e) => e
                .position()
                .ok_or_else(|| format!("{} event has no position", e.event_type())),
            other => Err(format!("expected location, got {}", other.type_name())),
        }
    }

    /// Belief-literal argument. Events stand for their `id` attribute.
    pub fn to_constant(&self) -> Result<Constant, String> {
        match self {
            EvalValue::Num(x) => Ok(Constant::Num(*x)),
            EvalValue::Text(s) => Ok(Constant::Atom(s.clone())),
            EvalValue::Bool(b) => Ok(Constant::Atom(b.to_string())),
            EvalValue::Geo(_) => Err("a location cannot be a belief argument".into()),
            EvalValue::Event(e) => match e.get("id") {
                Some(v) => EvalValue::from(v).to_constant(),
                None => Err(format!("{} event has no id to splice", e.event_type())),
            },
        }
    }
}

impl From<&Value> for EvalValue {
    fn from(v: &Value) -> Self {
        match v {
            Value::Number(x) => EvalValue::Num(*x),
            Value::Integer(i) => EvalValue::Num(*i as f64),
            Value::Text(s) => EvalValue::Text(s.clone()),
            Value::Boolean(b) => EvalValue::Bool(*b),
            Value::Geo(g) => EvalValue::Geo(*g),
        }
    }
}

impl From<Constant> for EvalValue {
    fn from(c: Constant) -> Self {
        match c {
            Constant::Num(x) => EvalValue::Num(x),
            Constant::Atom(s) => EvalValue::Text(s),
        }
    }
}

impl fmt::Display for EvalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalValue::Num(x) => write!(f, "{x}"),
            EvalValue::Text(s) => f.write_str(s),
            EvalValue::Bool(b) => write!(f, "{b}"),
            EvalValue::Geo(g) => write!(f, "({}, {})", g.lat, g.lon),
            EvalValue::Event(e) => match e.get("id") {
                Some(v) => write!(f, "{v}"),
                None => f.write_str(e.event_type()),
            },
        }
    }
}

pub type ServiceFn = fn(&[EvalValue]) -> Result<EvalValue, String>;

/// Named helper functions callable from rules, e.g. `Geo.distance`.
#[derive(Clone)]
pub struct Services {
    map: HashMap<String, ServiceFn>,
}

impl Default for Services {
    fn default() -> Self {
        let mut s = Self { map: HashMap::new() };
        s.register("Geo.distance", geo_distance);
        s.register("Geo.bearing", geo_bearing);
        s
    }
}

impl fmt::Debug for Services {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&String> = self.map.keys().collect();
        names.sort();
        f.debug_struct("Services").field("names", &names).finish()
    }
}

impl Services {
    /// Registry without any services.
    pub fn empty() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, f: ServiceFn) {
        self.map.insert(name.to_owned(), f);
    }

    pub fn get(&self, name: &str) -> Option<ServiceFn> {
        self.map.get(name).copied()
    }
}

fn two_points(args: &[EvalValue]) -> Result<(GeoPoint, GeoPoint), String> {
    match args {
        [a, b] => Ok((a.as_geo()?, b.as_geo()?)),
        [lat1, lon1, lat2, lon2] => {
            let p = |lat: &EvalValue, lon: &EvalValue| -> Result<GeoPoint, String> {
                GeoPoint::new(lat.as_num()?, lon.as_num()?).map_err(|e| e.to_string())
            };
            Ok((p(lat1, lon1)?, p(lat2, lon2)?))
        }
        _ => Err(format!(
            "expected 2 locations or 4 coordinates, got {} arguments",
            args.len()
        )),
    }
}

fn geo_distance(args: &[EvalValue]) -> Result<EvalValue, String> {
    let (a, b) = two_points(args)?;
    Ok(EvalValue::Num(geo::distance(a, b)))
}

fn geo_bearing(args: &[EvalValue]) -> Result<EvalValue, String> {
    let (a, b) = two_points(args)?;
    Ok(EvalValue::Num(geo::bearing(a, b)))
}

/// Applies an aggregate to the numeric attribute `attribute` of `contents`.
/// `sum` of nothing is 0; the other aggregates need at least one event.
pub fn evaluate_aggregate<'a, I>(contents: I, func: AggFunc, attribute: &str) -> Result<f64, EngineError>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut values = Vec::new();
    for e in contents {
        let v = attribute_of(e, attribute)
            .map_err(EngineError::Evaluation)?
            .as_num()
            .map_err(EngineError::Evaluation)?;
        values.push(v);
    }
    aggregate(&values, func)
}

pub(crate) fn aggregate(values: &[f64], func: AggFunc) -> Result<f64, EngineError> {
    if values.is_empty() {
        return match func {
            AggFunc::Sum => Ok(0.0),
            _ => Err(EngineError::EmptyWindow),
        };
    }
    Ok(match func {
        AggFunc::Sum => values.iter().sum(),
        AggFunc::Avg => values.iter().sum::<f64>() / values.len() as f64,
        AggFunc::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AggFunc::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub(crate) fn attribute_of(e: &Event, name: &str) -> Result<EvalValue, String> {
    match e.get(name) {
        Some(v) => Ok(v.into()),
        None if name == "timestamp" => Ok(EvalValue::Num(e.timestamp() as f64)),
        None => Err(format!("{} has no attribute `{name}`", e.event_type())),
    }
}

/// Alias bindings of a (partial) match. Slots follow the rule's alias order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Partial {
    pub slots: Vec<Option<Arc<Event>>>,
    /// Window contents for windowed atoms, same indexing as `slots`.
    pub groups: Vec<Option<Arc<Vec<Arc<Event>>>>>,
    /// Timestamp of the earliest bound event.
    pub start: Option<Timestamp>,
}

impl Partial {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
            groups: vec![None; n],
            start: None,
        }
    }

    pub fn bind(&self, slot: usize, ev: &Arc<Event>) -> Partial {
        let mut p = self.clone();
        p.slots[slot] = Some(ev.clone());
        p.start = Some(p.start.map_or(ev.timestamp(), |s| s.min(ev.timestamp())));
        p
    }

    pub fn is_bound(&self, slot: usize) -> bool {
        self.slots[slot].is_some()
    }
}

/// Everything an expression may refer to.
pub(crate) struct Scope<'a> {
    pub names: &'a [String],
    pub partial: &'a Partial,
    /// Select outputs, visible to actions only. They shadow pattern aliases.
    pub outputs: &'a [(String, EvalValue)],
    pub bb: &'a BeliefBase,
    pub services: &'a Services,
}

impl Scope<'_> {
    fn slot(&self, alias: &str) -> Option<usize> {
        self.names.iter().position(|n| n == alias)
    }

    /// True when every alias `e` mentions is bound or a select output.
    pub fn covers(&self, e: &Expr) -> bool {
        e.aliases()
            .iter()
            .all(|a| self.outputs.iter().any(|(n, _)| n == a) || self.slot(a).is_some_and(|s| self.partial.is_bound(s)))
    }

    fn lookup(&self, alias: &str) -> Result<EvalValue, String> {
        if let Some((_, v)) = self.outputs.iter().find(|(n, _)| n == alias) {
            return Ok(v.clone());
        }
        match self.slot(alias).and_then(|s| self.partial.slots[s].clone()) {
            Some(e) => Ok(EvalValue::Event(e)),
            None => Err(format!("alias `{alias}` is not bound in this match")),
        }
    }

    pub fn eval(&self, e: &Expr) -> Result<EvalValue, String> {
        match e {
            Expr::Int(i) => Ok(EvalValue::Num(*i as f64)),
            Expr::Num(x) => Ok(EvalValue::Num(*x)),
            Expr::Str(s) => Ok(EvalValue::Text(s.clone())),
            Expr::Bool(b) => Ok(EvalValue::Bool(*b)),
            Expr::Duration(ms) => Ok(EvalValue::Num(*ms as f64)),
            Expr::Distance(m) => Ok(EvalValue::Num(*m)),
            Expr::Path(p) => {
                let head = self.lookup(&p[0])?;
                match (p.len(), head) {
                    (1, v) => Ok(v),
                    (2, EvalValue::Event(ev)) => attribute_of(&ev, &p[1]),
                    (2, EvalValue::Geo(g)) => match p[1].as_str() {
                        "lat" => Ok(EvalValue::Num(g.lat)),
                        "lon" => Ok(EvalValue::Num(g.lon)),
                        other => Err(format!("a location has no `{other}`")),
                    },
                    _ => Err(format!("cannot resolve `{}`", p.join("."))),
                }
            }
            Expr::Unary(UnOp::Neg, x) => Ok(EvalValue::Num(-self.eval(x)?.as_num()?)),
            Expr::Unary(UnOp::Not, x) => Ok(EvalValue::Bool(!self.eval(x)?.as_bool()?)),
            Expr::Binary(BinOp::And, l, r) => Ok(EvalValue::Bool(self.eval(l)?.as_bool()? && self.eval(r)?.as_bool()?)),
            Expr::Binary(BinOp::Or, l, r) => Ok(EvalValue::Bool(self.eval(l)?.as_bool()? || self.eval(r)?.as_bool()?)),
            Expr::Binary(op, l, r) => binary(*op, self.eval(l)?, self.eval(r)?),
            Expr::Call { service, args } => {
                let f = self
                    .services
                    .get(service)
                    .ok_or_else(|| format!("unknown service `{service}`"))?;
                let args = args.iter().map(|a| self.eval(a)).collect::<Result<Vec<_>, _>>()?;
                f(&args).map_err(|m| format!("{service}: {m}"))
            }
            Expr::Aggregate { func, arg } => {
                let Expr::Path(p) = &**arg else {
                    return Err("aggregate argument must be an attribute path".into());
                };
                let slot = self.slot(&p[0]).ok_or_else(|| format!("unknown alias `{}`", p[0]))?;
                let values: Vec<f64> = match (&self.partial.groups[slot], &self.partial.slots[slot]) {
                    (Some(g), _) => g
                        .iter()
                        .map(|ev| attribute_of(ev, &p[1])?.as_num())
                        .collect::<Result<_, _>>()?,
                    (None, Some(ev)) => vec![attribute_of(ev, &p[1])?.as_num()?],
                    (None, None) => Vec::new(),
                };
                aggregate(&values, *func).map(EvalValue::Num).map_err(|e| e.to_string())
            }
            Expr::Belief { op, template } => {
                let q = self.instantiate(template)?;
                match op {
                    BeliefOp::Contains => Ok(EvalValue::Bool(self.bb.contains(&q))),
                    BeliefOp::Get => self.bb.get(&q).map(EvalValue::from).map_err(|e| e.to_string()),
                }
            }
        }
    }

    pub fn instantiate(&self, t: &LiteralTemplate) -> Result<BeliefQuery, String> {
        let mut err = None;
        let q = t.instantiate(|e| match self.eval(e).and_then(|v| v.to_constant()) {
            Ok(c) => c,
            Err(m) => {
                err.get_or_insert(m);
                Constant::Num(0.0)
            }
        });
        match err {
            Some(m) => Err(m),
            None => Ok(q),
        }
    }

    pub fn truthy(&self, e: &Expr) -> Result<bool, String> {
        self.eval(e)?.as_bool()
    }
}

fn binary(op: BinOp, l: EvalValue, r: EvalValue) -> Result<EvalValue, String> {
    use EvalValue::*;
    let cmp = |o: std::cmp::Ordering| -> bool {
        use std::cmp::Ordering::*;
        match op {
            BinOp::Eq => o == Equal,
            BinOp::Ne => o != Equal,
            BinOp::Lt => o == Less,
            BinOp::Le => o != Greater,
            BinOp::Gt => o == Greater,
            BinOp::Ge => o != Less,
            _ => unreachable!("comparison operator"),
        }
    };
    match (op, &l, &r) {
        (BinOp::Add, Num(a), Num(b)) => Ok(Num(a + b)),
        (BinOp::Sub, Num(a), Num(b)) => Ok(Num(a - b)),
        (BinOp::Mul, Num(a), Num(b)) => Ok(Num(a * b)),
        (BinOp::Div, Num(a), Num(b)) => Ok(Num(a / b)),
        (BinOp::Add, Text(_), _) | (BinOp::Add, _, Text(_)) => Ok(Text(format!("{l}{r}"))),
        (BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge, Num(a), Num(b)) => {
            // NaN compares false under every operator except `!=`.
            match a.partial_cmp(b) {
                Some(o) => Ok(Bool(cmp(o))),
                None => Ok(Bool(op == BinOp::Ne)),
            }
        }
        (BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge, Text(a), Text(b)) => {
            Ok(Bool(cmp(a.cmp(b))))
        }
        (BinOp::Eq | BinOp::Ne, Bool(a), Bool(b)) => Ok(Bool(cmp(a.cmp(b)))),
        (BinOp::Eq | BinOp::Ne, Geo(a), Geo(b)) => Ok(Bool((a == b) == (op == BinOp::Eq))),
        (BinOp::Eq | BinOp::Ne, Event(a), Event(b)) => Ok(Bool((a == b) == (op == BinOp::Eq))),
        // An event compared with a scalar stands for its id.
        (BinOp::Eq | BinOp::Ne, Event(_), Text(_) | Num(_)) | (BinOp::Eq | BinOp::Ne, Text(_) | Num(_), Event(_)) => {
            let id = |v: &EvalValue| v.to_constant().map(EvalValue::from);
            binary(op, id(&l)?, id(&r)?)
        }
        _ => Err(format!(
            "cannot apply `{}` to {} and {}",
            op.symbol(),
            l.type_name(),
            r.type_name()
        )),
    }
}

/// Service names an expression calls.
pub(crate) fn services_in(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Call { service, args } => {
            out.push(service.clone());
            args.iter().for_each(|a| services_in(a, out));
        }
        Expr::Unary(_, x) => services_in(x, out),
        Expr::Binary(_, l, r) => {
            services_in(l, out);
            services_in(r, out);
        }
        Expr::Aggregate { arg, .. } => services_in(arg, out),
        Expr::Belief { template, .. } => {
            for a in &template.args {
                if let crate::epl::TemplateArg::Hole(h) = a {
                    services_in(h, out);
                }
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates() {
        assert_eq!(aggregate(&[], AggFunc::Sum).unwrap(), 0.0);
        assert!(matches!(aggregate(&[], AggFunc::Avg), Err(EngineError::EmptyWindow)));
        assert_eq!(aggregate(&[2.0, 4.0, 6.0], AggFunc::Avg).unwrap(), 4.0);
        assert_eq!(aggregate(&[1.5, 7.2, 3.0], AggFunc::Max).unwrap(), 7.2);
        assert_eq!(aggregate(&[1.5, 7.2, 3.0], AggFunc::Min).unwrap(), 1.5);
    }

    #[test]
    fn distance_overloads() {
        let a = EvalValue::Geo(GeoPoint::new(52.3759, 9.7320).unwrap());
        let b = EvalValue::Geo(GeoPoint::new(52.3760, 9.7320).unwrap());
        let d2 = geo_distance(&[a, b]).unwrap().as_num().unwrap();
        let d4 = geo_distance(&[
            EvalValue::Num(52.3759),
            EvalValue::Num(9.7320),
            EvalValue::Num(52.3760),
            EvalValue::Num(9.7320),
        ])
        .unwrap()
        .as_num()
        .unwrap();
        assert_eq!(d2, d4);
        assert!((d2 - 11.119_492_664_455_873).abs() < 1e-6);
        assert!(geo_distance(&[EvalValue::Num(1.0)]).is_err());
    }

    #[test]
    fn comparisons_are_exact() {
        let gt = binary(BinOp::Gt, EvalValue::Num(1.0), EvalValue::Num(1.0)).unwrap();
        assert!(!gt.as_bool().unwrap());
        assert!(binary(BinOp::Lt, EvalValue::Num(1.0), EvalValue::Text("x".into())).is_err());
    }
}
