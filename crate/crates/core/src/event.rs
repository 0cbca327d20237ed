//! Typed, timestamped percepts and the schema registry that constrains them.
//!
//! Every element flowing through a perception pipeline is an [`Event`]: a type
//! symbol, an event-time timestamp in milliseconds and an ordered attribute
//! map. Types must be registered in a [`SchemaRegistry`] before events of that
//! type can be constructed; the registry is frozen (shared behind an `Arc`)
//! before any stream starts.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated event time in milliseconds.
pub type Timestamp = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("event type `{0}` is already registered")]
    DuplicateSchema(String),
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("schema violation for `{event_type}`: {reason}")]
    SchemaViolation { event_type: String, reason: String },
    #[error("invalid geo-point ({lat}, {lon})")]
    InvalidGeoPoint { lat: f64, lon: f64 },
}

/// Position on the WGS84 sphere, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, EventError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(EventError::InvalidGeoPoint { lat, lon });
        }
        Ok(Self { lat, lon })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Integer(i64),
    Text(String),
    Boolean(bool),
    Geo(GeoPoint),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Number(_) => ValueKind::Number,
            Value::Integer(_) => ValueKind::Integer,
            Value::Text(_) => ValueKind::Text,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::Geo(_) => ValueKind::Geo,
        }
    }

    /// Numeric view; integers widen to `f64`.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(x) => serde_json::json!(x),
            Value::Integer(i) => serde_json::json!(i),
            Value::Text(s) => serde_json::json!(s),
            Value::Boolean(b) => serde_json::json!(b),
            Value::Geo(p) => serde_json::json!({ "lat": p.lat, "lon": p.lon }),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Geo(p) => write!(f, "geo({}, {})", p.lat, p.lon),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Integer(i)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Boolean(b)
    }
}

impl From<GeoPoint> for Value {
    fn from(p: GeoPoint) -> Self {
        Value::Geo(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Number,
    Integer,
    Text,
    Boolean,
    Geo,
}

impl ValueKind {
    fn accepts(self, value: &Value) -> bool {
        match (self, value) {
            (ValueKind::Number, Value::Number(_) | Value::Integer(_)) => true,
            (k, v) => k == v.kind(),
        }
    }
}

/// Event categories of the crowdshipping taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    SensorData,
    DomainEvent,
    Message,
    Context,
    Situation,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::SensorData => "sensor-data",
            Category::DomainEvent => "domain-event",
            Category::Message => "message",
            Category::Context => "context",
            Category::Situation => "situation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSchema {
    pub event_type: String,
    pub attributes: Vec<(String, ValueKind)>,
    pub category: Category,
}

impl EventSchema {
    pub fn new(event_type: &str, category: Category, attributes: &[(&str, ValueKind)]) -> Self {
        Self {
            event_type: event_type.to_owned(),
            attributes: attributes.iter().map(|(n, k)| ((*n).to_owned(), *k)).collect(),
            category,
        }
    }

    pub fn attribute(&self, name: &str) -> Option<ValueKind> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, k)| *k)
    }
}

/// An immutable percept. Equality is structural.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    event_type: String,
    timestamp: Timestamp,
    attributes: IndexMap<String, Value>,
}

impl Event {
    pub fn event_type(&self) -> &str {
        &self.event_type
    }

    pub fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    pub fn attributes(&self) -> &IndexMap<String, Value> {
        &self.attributes
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.attributes.get(name)
    }

    /// Same event at a different event time. Used when a message payload
    /// becomes visible in a recipient's inbox.
    pub fn restamped(&self, timestamp: Timestamp) -> Event {
        Event {
            timestamp,
            ..self.clone()
        }
    }

    /// Location carried by the event: a `location` geo attribute, or a
    /// `lat`/`lon` number pair.
    pub fn position(&self) -> Option<GeoPoint> {
        if let Some(Value::Geo(p)) = self.get("location") {
            return Some(*p);
        }
        let lat = self.get("lat")?.as_f64()?;
        let lon = self.get("lon")?.as_f64()?;
        Some(GeoPoint { lat, lon })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let attrs: serde_json::Map<String, serde_json::Value> =
            self.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
        serde_json::json!({
            "type": self.event_type,
            "t": self.timestamp,
            "attrs": attrs,
        })
    }
}

/// Registry of event schemas. Build it up front, then share it frozen.
#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: IndexMap<String, EventSchema>,
    aliases: HashMap<String, String>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, schema: EventSchema) -> Result<(), EventError> {
        if self.resolve(&schema.event_type).is_some() {
            return Err(EventError::DuplicateSchema(schema.event_type));
        }
        self.schemas.insert(schema.event_type.clone(), schema);
        Ok(())
    }

    /// Registers an alternative spelling for a registered type, e.g. `GPS`
    /// for `Gps`.
    pub fn alias(&mut self, alias: &str, canonical: &str) -> Result<(), EventError> {
        if !self.schemas.contains_key(canonical) {
            return Err(EventError::UnknownEventType(canonical.to_owned()));
        }
        if self.resolve(alias).is_some() {
            return Err(EventError::DuplicateSchema(alias.to_owned()));
        }
        self.aliases.insert(alias.to_owned(), canonical.to_owned());
        Ok(())
    }

    /// Canonical type name for `name`, following aliases.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        if let Some((k, _)) = self.schemas.get_key_value(name) {
            return Some(k.as_str());
        }
        self.aliases.get(name).map(String::as_str)
    }

    pub fn schema(&self, name: &str) -> Option<&EventSchema> {
        self.resolve(name).and_then(|c| self.schemas.get(c))
    }

    pub fn schemas(&self) -> impl Iterator<Item = &EventSchema> {
        self.schemas.values()
    }

    pub fn freeze(self) -> Arc<SchemaRegistry> {
        Arc::new(self)
    }

    pub fn make_event<K, I>(&self, event_type: &str, timestamp: Timestamp, attributes: I) -> Result<Event, EventError>
    where
        K: Into<String>,
        I: IntoIterator<Item = (K, Value)>,
    {
        let schema = self
            .schema(event_type)
            .ok_or_else(|| EventError::UnknownEventType(event_type.to_owned()))?;
        let violation = |reason: String| EventError::SchemaViolation {
            event_type: schema.event_type.clone(),
            reason,
        };
        let mut given: HashMap<String, Value> = HashMap::new();
        for (k, v) in attributes {
            let k = k.into();
            if schema.attribute(&k).is_none() {
                return Err(violation(format!("undeclared attribute `{k}`")));
            }
            if given.insert(k.clone(), v).is_some() {
                return Err(violation(format!("attribute `{k}` given twice")));
            }
        }
        let mut attrs = IndexMap::with_capacity(schema.attributes.len());
        for (name, kind) in &schema.attributes {
            let value = given
                .remove(name)
                .ok_or_else(|| violation(format!("missing attribute `{name}`")))?;
            if !kind.accepts(&value) {
                return Err(violation(format!(
                    "attribute `{name}` expects {kind:?}, got {:?}",
                    value.kind()
                )));
            }
            let value = match (kind, value) {
                (ValueKind::Number, Value::Integer(i)) => Value::Number(i as f64),
                (ValueKind::Geo, Value::Geo(p)) => Value::Geo(GeoPoint::new(p.lat, p.lon)?),
                (_, v) => v,
            };
            attrs.insert(name.clone(), value);
        }
        Ok(Event {
            event_type: schema.event_type.clone(),
            timestamp,
            attributes: attrs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gps_registry() -> SchemaRegistry {
        let mut r = SchemaRegistry::new();
        r.register(EventSchema::new(
            "Gps",
            Category::SensorData,
            &[("lat", ValueKind::Number), ("lon", ValueKind::Number)],
        ))
        .unwrap();
        r
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut r = gps_registry();
        let again = EventSchema::new("Gps", Category::SensorData, &[]);
        assert_eq!(r.register(again), Err(EventError::DuplicateSchema("Gps".into())));
    }

    #[test]
    fn make_event_validates_attributes() {
        let r = gps_registry();
        let e = r
            .make_event("Gps", 1000, [("lat", 52.3759.into()), ("lon", 9.7320.into())])
            .unwrap();
        assert_eq!(e.timestamp(), 1000);
        assert_eq!(
            e.position(),
            Some(GeoPoint {
                lat: 52.3759,
                lon: 9.7320
            })
        );

        let missing = r.make_event("Gps", 1000, [("lat", Value::from(52.3759))]);
        assert!(matches!(missing, Err(EventError::SchemaViolation { .. })));

        let mistyped = r.make_event("Gps", 0, [("lat", Value::from("x")), ("lon", 1.0.into())]);
        assert!(matches!(mistyped, Err(EventError::SchemaViolation { .. })));

        let unknown = r.make_event::<&str, _>("Nope", 0, []);
        assert_eq!(unknown, Err(EventError::UnknownEventType("Nope".into())));
    }

    #[test]
    fn integers_widen_for_number_attributes() {
        let r = gps_registry();
        let e = r
            .make_event("Gps", 0, [("lat", Value::Integer(52)), ("lon", 9.0.into())])
            .unwrap();
        assert_eq!(e.get("lat"), Some(&Value::Number(52.0)));
    }

    #[test]
    fn aliases_resolve_to_canonical_type() {
        let mut r = gps_registry();
        r.alias("GPS", "Gps").unwrap();
        assert_eq!(r.resolve("GPS"), Some("Gps"));
        let e = r
            .make_event("GPS", 0, [("lat", 1.0.into()), ("lon", 2.0.into())])
            .unwrap();
        assert_eq!(e.event_type(), "Gps");
        assert!(r.alias("GPS", "Gps").is_err());
    }

    #[test]
    fn geo_points_are_range_checked() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(-90.0, 180.0).is_ok());
    }
}
