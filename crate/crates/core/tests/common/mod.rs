//! Brute-force references for the shipped rules, seeded stream generators
//! and a driver that runs a single rule over a stream.
#![allow(dead_code)]

use std::sync::Arc;

use aep_core::belief::{BeliefBase, BeliefQuery};
use aep_core::crowdshipping::{load_rule_corpus, registry};
use aep_core::engine::{PerceptionPipeline, PipelineOutput, Services};
use aep_core::epl::Rule;
use aep_core::event::{Event, GeoPoint, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HOME: (f64, f64) = (52.3759, 9.7320);

/// Great-circle distance on a 6 371 km sphere, written out independently of
/// the library.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6_371_000.0 * h.sqrt().asin()
}

/// Moves a point by local east/north meters (small offsets only).
pub fn shift(p: (f64, f64), east: f64, north: f64) -> (f64, f64) {
    let lat = p.0 + (north / 6_371_000.0).to_degrees();
    let lon = p.1 + (east / (6_371_000.0 * p.0.to_radians().cos())).to_degrees();
    (lat, lon)
}

/// One rule firing, reduced to comparable parts.
#[derive(Debug, Clone)]
pub struct Firing {
    pub t: u64,
    /// `forward`, `emit:<Type>` or `add`.
    pub kind: String,
    /// Text attributes or the literal.
    pub key: String,
    pub values: Vec<f64>,
}

impl Firing {
    fn new(t: u64, kind: &str, key: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            t,
            kind: kind.into(),
            key: key.into(),
            values,
        }
    }

    fn sort_key(&self) -> (u64, String, String) {
        (self.t, self.kind.clone(), self.key.clone())
    }
}

fn num(v: &Value) -> Option<f64> {
    match v {
        Value::Number(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn reduce(o: &PipelineOutput) -> Firing {
    match o {
        PipelineOutput::Forward { event, .. } => {
            let a = event.attributes();
            Firing::new(
                event.timestamp(),
                "forward",
                "",
                vec![num(&a["lat"]).unwrap(), num(&a["lon"]).unwrap()],
            )
        }
        PipelineOutput::Emit { event, .. } => {
            let mut key = Vec::new();
            let mut values = Vec::new();
            for (k, v) in event.attributes() {
                match v {
                    Value::Text(s) => key.push(format!("{k}={s}")),
                    Value::Geo(p) => values.extend([p.lat, p.lon]),
                    other => values.push(num(other).unwrap()),
                }
            }
            Firing::new(
                event.timestamp(),
                &format!("emit:{}", event.event_type()),
                key.join(","),
                values,
            )
        }
        PipelineOutput::BeliefAdd { literal, t, .. } => Firing::new(*t, "add", literal.to_string(), vec![]),
        PipelineOutput::BeliefDel { literal, t, .. } => Firing::new(*t, "del", literal.to_string(), vec![]),
    }
}

/// Compares firing multisets; values must agree to `tol` (relative to
/// magnitude, absolute below 1).
pub fn same_firings(mut got: Vec<Firing>, mut want: Vec<Firing>, tol: f64) -> Result<(), String> {
    let order = |a: &Firing, b: &Firing| {
        a.sort_key()
            .cmp(&b.sort_key())
            .then_with(|| a.values.partial_cmp(&b.values).unwrap_or(std::cmp::Ordering::Equal))
    };
    got.sort_by(order);
    want.sort_by(order);
    if got.len() != want.len() {
        return Err(format!(
            "{} firings, reference has {}\n got: {got:?}\nwant: {want:?}",
            got.len(),
            want.len()
        ));
    }
    for (g, w) in got.iter().zip(&want) {
        let close = g.values.len() == w.values.len()
            && g.values
                .iter()
                .zip(&w.values)
                .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0));
        if g.sort_key() != w.sort_key() || !close {
            return Err(format!("mismatch: got {g:?}, reference {w:?}"));
        }
    }
    Ok(())
}

pub fn corpus_rule(name_part: &str) -> Rule {
    let (rules, _) = load_rule_corpus().unwrap();
    rules
        .into_iter()
        .find(|r| r.name.contains(name_part))
        .unwrap_or_else(|| panic!("no rule named like {name_part}"))
}

/// A stream plus the belief base it runs against.
pub struct Case {
    pub events: Vec<Event>,
    pub beliefs: Vec<BeliefQuery>,
    /// Final time the pipeline is advanced to.
    pub horizon: u64,
    /// Whether belief additions are applied as an agent would.
    pub apply: bool,
}

/// Runs one rule alone over the case.
pub fn run_rule(rule: &Rule, case: &Case) -> Vec<Firing> {
    let mut p = PerceptionPipeline::new(vec![rule.clone()], Arc::new(registry()), Services::default()).unwrap();
    let mut bb = BeliefBase::new();
    for b in &case.beliefs {
        bb.add(b.clone(), 0, None).unwrap();
    }
    let mut out = Vec::new();
    let mut absorb = |os: Vec<PipelineOutput>, bb: &mut BeliefBase| {
        for o in os {
            if case.apply {
                if let PipelineOutput::BeliefAdd { literal, t, .. } = &o {
                    bb.add(literal.clone(), *t, None).unwrap();
                }
            }
            out.push(reduce(&o));
        }
    };
    for e in &case.events {
        let os = p.ingest(e.clone(), &bb).unwrap();
        absorb(os, &mut bb);
    }
    let os = p.advance_time(case.horizon, &bb).unwrap();
    absorb(os, &mut bb);
    assert!(p.take_failures().is_empty());
    out
}

fn ev(ty: &str, t: u64, attrs: Vec<(&str, Value)>) -> Event {
    registry().make_event(ty, t, attrs).unwrap()
}

fn gps(t: u64, p: (f64, f64)) -> Event {
    ev("Gps", t, vec![("lat", Value::Number(p.0)), ("lon", Value::Number(p.1))])
}

fn text(e: &Event, k: &str) -> String {
    match &e.attributes()[k] {
        Value::Text(s) => s.clone(),
        other => panic!("{k}: {other:?}"),
    }
}

fn number(e: &Event, k: &str) -> f64 {
    num(&e.attributes()[k]).unwrap()
}

fn point(e: &Event, k: &str) -> (f64, f64) {
    match &e.attributes()[k] {
        Value::Geo(p) => (p.lat, p.lon),
        other => panic!("{k}: {other:?}"),
    }
}

fn latlon(e: &Event) -> (f64, f64) {
    (number(e, "lat"), number(e, "lon"))
}

fn literal(functor: &str, args: &[&str]) -> BeliefQuery {
    let text = if args.is_empty() {
        functor.to_owned()
    } else {
        format!("{functor}({})", args.join(", "))
    };
    BeliefQuery::parse(&text).unwrap()
}

// ---- GPS movement -------------------------------------------------------

/// GPS fixes with sub-meter jitter, standing still, walking and 15-40 m
/// jumps, at 0-3 s spacing.
pub fn gps_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let mut t = rng.random_range(0..10_000);
    let mut at = HOME;
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        t += [0, 500, 1000, 1000, 1500, 2000, 2000, 2500, 3000][rng.random_range(0..9)];
        let r: f64 = rng.random();
        at = if r < 0.2 {
            at
        } else if r < 0.9 {
            shift(at, rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        } else {
            let d = rng.random_range(15.0..40.0);
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            shift(at, d * a.cos(), d * a.sin())
        };
        events.push(gps(t, at));
    }
    let beliefs = if rng.random_bool(0.5) {
        vec![literal("isCycling", &[])]
    } else {
        vec![]
    };
    Case {
        events,
        beliefs,
        horizon: t + 1000,
        apply: false,
    }
}

/// Movement: one firing per consecutive pair more than 1 m apart.
pub fn has_moved_ref(case: &Case) -> Vec<Firing> {
    case.events
        .windows(2)
        .filter_map(|w| {
            let d = haversine(latlon(&w[0]), latlon(&w[1]));
            let (lat, lon) = latlon(&w[1]);
            (d > 1.0).then(|| Firing::new(w[1].timestamp(), "emit:HasMoved", "", vec![lat, lon, d]))
        })
        .collect()
}

/// Plausibility: without the cycling belief everything passes; with it a
/// fix is dropped only if the last passed fix is at most 2 s old and at
/// least 20 m away.
pub fn plausible_ref(case: &Case) -> Vec<Firing> {
    let cycling = !case.beliefs.is_empty();
    let mut anchor: Option<&Event> = None;
    let mut out = Vec::new();
    for e in &case.events {
        let drop = cycling
            && anchor.is_some_and(|a| e.timestamp() - a.timestamp() <= 2000 && haversine(latlon(a), latlon(e)) >= 20.0);
        if !drop {
            out.push(Firing::new(
                e.timestamp(),
                "forward",
                "",
                vec![number(e, "lat"), number(e, "lon")],
            ));
            anchor = Some(e);
        }
    }
    out
}

// ---- Speed ---------------------------------------------------------------

fn has_moved(t: u64, p: (f64, f64), d: f64) -> Event {
    ev(
        "HasMoved",
        t,
        vec![
            ("lat", Value::Number(p.0)),
            ("lon", Value::Number(p.1)),
            ("distance", Value::Number(d)),
        ],
    )
}

/// Movement events with bursts and long pauses.
pub fn speed_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let mut t = rng.random_range(0..60_000);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        t += if rng.random_bool(0.05) {
            rng.random_range(30_000..120_000)
        } else {
            rng.random_range(0..5000)
        };
        events.push(has_moved(t, HOME, rng.random_range(0.0..10.0)));
    }
    let horizon = t + rng.random_range(0..60_000);
    Case {
        events,
        beliefs: vec![],
        horizon,
        apply: false,
    }
}

/// Speed: 30 s epochs [k*30, (k+1)*30) s; each non-empty epoch fires at its
/// end with the summed distance over 30.
pub fn speed_ref(case: &Case) -> Vec<Firing> {
    let mut sums: std::collections::BTreeMap<u64, f64> = Default::default();
    for e in &case.events {
        *sums.entry(e.timestamp() / 30_000).or_default() += number(e, "distance");
    }
    sums.into_iter()
        .map(|(k, s)| ((k + 1) * 30_000, s))
        .filter(|(b, _)| *b <= case.horizon)
        .map(|(b, s)| Firing::new(b, "emit:Speed", "", vec![s / 30.0]))
        .collect()
}

// ---- Parcels ---------------------------------------------------------------

fn accepted(t: u64, id: &str, dest: (f64, f64)) -> Event {
    ev(
        "ParcelAccepted",
        t,
        vec![
            ("id", Value::from(id)),
            ("destLat", Value::Number(dest.0)),
            ("destLon", Value::Number(dest.1)),
            ("reward", Value::Number(3.0)),
        ],
    )
}

fn has_parcel(id: &str, dest: (f64, f64)) -> BeliefQuery {
    literal("hasParcel", &[id, &dest.0.to_string(), &dest.1.to_string()])
}

/// Parcels (ids may repeat) interleaved with movement; some parcels are
/// believed held.
pub fn distance_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let ids = ["p0", "p1", "p2", "p3"];
    let dests: Vec<(f64, f64)> = ids
        .iter()
        .map(|_| {
            shift(
                HOME,
                rng.random_range(-3000.0..3000.0),
                rng.random_range(-3000.0..3000.0),
            )
        })
        .collect();
    let mut t = 0;
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.random_range(0..5000);
        if rng.random_bool(0.1) {
            let i = rng.random_range(0..ids.len());
            events.push(accepted(t, ids[i], dests[i]));
        } else {
            let p = shift(
                HOME,
                rng.random_range(-2000.0..2000.0),
                rng.random_range(-2000.0..2000.0),
            );
            events.push(has_moved(t, p, rng.random_range(1.0..5.0)));
        }
    }
    let beliefs = ids
        .iter()
        .zip(&dests)
        .filter(|_| rng.random_bool(0.6))
        .map(|(id, d)| has_parcel(id, *d))
        .collect();
    Case {
        events,
        beliefs,
        horizon: t + 1000,
        apply: false,
    }
}

fn believed_dest(case: &Case, id: &str) -> Option<(f64, f64)> {
    case.beliefs.iter().find_map(|b| {
        let s = b.to_string();
        let inner = s.strip_prefix(&format!("hasParcel({id},"))?.strip_suffix(')')?;
        let (lat, lon) = inner.split_once(',')?;
        Some((lat.trim().parse().ok()?, lon.trim().parse().ok()?))
    })
}

/// Distance to destination: every movement after every acceptance of a
/// believed-held parcel, measured to the believed destination.
pub fn distance_ref(case: &Case) -> Vec<Firing> {
    let mut out = Vec::new();
    for (j, m) in case.events.iter().enumerate() {
        if m.event_type() != "HasMoved" {
            continue;
        }
        for p in &case.events[..j] {
            if p.event_type() != "ParcelAccepted" {
                continue;
            }
            let id = text(p, "id");
            if let Some(dest) = believed_dest(case, &id) {
                let d = haversine(latlon(m), dest);
                out.push(Firing::new(
                    m.timestamp(),
                    "emit:DistanceToDestination",
                    format!("parcelId={id}"),
                    vec![d],
                ));
            }
        }
    }
    out
}

fn progress(t: u64, id: &str, value: f64) -> Event {
    ev(
        "DistanceToDestination",
        t,
        vec![("value", Value::Number(value)), ("parcelId", Value::from(id))],
    )
}

/// Distinct parcels, movement and distance reports over hours, with gaps
/// long enough for the five-minute timers.
pub fn stall_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let mut t = 0;
    let mut parcels: Vec<(String, f64)> = Vec::new();
    let mut events = Vec::with_capacity(n);
    let mut beliefs = Vec::new();
    for _ in 0..n {
        t += if rng.random_bool(0.1) {
            rng.random_range(100_000..400_000)
        } else {
            rng.random_range(0..90_000)
        };
        let r: f64 = rng.random();
        if r < 0.08 || parcels.is_empty() {
            let id = format!("p{}", parcels.len());
            let dest = shift(HOME, 0.0, 2000.0);
            if rng.random_bool(0.7) {
                beliefs.push(has_parcel(&id, dest));
            }
            events.push(accepted(t, &id, dest));
            parcels.push((id, rng.random_range(500.0..3000.0)));
        } else if r < 0.45 {
            events.push(has_moved(t, HOME, 2.0));
        } else {
            let i = rng.random_range(0..parcels.len() + 1);
            if i == parcels.len() {
                events.push(progress(t, "nobody", 100.0));
            } else {
                let (id, v) = &mut parcels[i];
                *v = (*v - rng.random_range(0.0..45.0)).max(0.0);
                events.push(progress(t, id, *v));
            }
        }
    }
    Case {
        events,
        beliefs,
        horizon: t + rng.random_range(0..400_000),
        apply: true,
    }
}

/// Stall detection, per believed-held parcel: fires once, either when five
/// minutes pass without movement (each movement restarts the clock, and a
/// clock reaching its deadline wins ties with events at that instant) or
/// at the first report more than five minutes after the first report of
/// the current attempt, if it closed less than 20 m. A larger closing
/// restarts the attempt from that report.
pub fn stall_ref(case: &Case) -> Vec<Firing> {
    const FIVE: u64 = 300_000;
    let mut out = Vec::new();
    for (i, p) in case.events.iter().enumerate() {
        if p.event_type() != "ParcelAccepted" {
            continue;
        }
        let id = text(p, "id");
        if believed_dest(case, &id).is_none() {
            continue;
        }
        let mut deadline = p.timestamp() + FIVE;
        let mut first: Option<&Event> = None;
        let mut fired = None;
        for e in &case.events[i + 1..] {
            let t = e.timestamp();
            if deadline <= t {
                fired = Some(deadline);
                break;
            }
            match e.event_type() {
                "HasMoved" => deadline = t + FIVE,
                "DistanceToDestination" if text(e, "parcelId") == id => match first {
                    None => first = Some(e),
                    Some(d1) if t > d1.timestamp() + FIVE => {
                        if number(e, "value") > number(d1, "value") - 20.0 {
                            fired = Some(t);
                            break;
                        }
                        first = None;
                        deadline = t + FIVE;
                    }
                    Some(_) => {}
                },
                _ => {}
            }
        }
        if fired.is_none() && deadline <= case.horizon {
            fired = Some(deadline);
        }
        if let Some(t) = fired {
            out.push(Firing::new(t, "add", format!("SlowDeliveryProgress({id})"), vec![]));
        }
    }
    out
}

// ---- Auctions ----------------------------------------------------------------

fn auction(t: u64, id: &str, at: (f64, f64), deadline_s: f64, interval_ms: f64) -> Event {
    ev(
        "AuctionOpened",
        t,
        vec![
            ("id", Value::from(id)),
            ("parcelId", Value::from("px")),
            ("auctioneer", Value::from("s")),
            ("location", Value::Geo(GeoPoint { lat: at.0, lon: at.1 })),
            ("pickupDeadline", Value::Number(deadline_s)),
            ("biddingInterval", Value::Number(interval_ms)),
            ("reward", Value::Number(4.0)),
            ("destLat", Value::Number(HOME.0)),
            ("destLon", Value::Number(HOME.1)),
        ],
    )
}

/// Auctions, locations and speeds (some zero).
pub fn arrival_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let mut t = 0;
    let mut events = Vec::with_capacity(n);
    for k in 0..n {
        t += rng.random_range(0..3000);
        let r: f64 = rng.random();
        let at = shift(
            HOME,
            rng.random_range(-1000.0..1000.0),
            rng.random_range(-1000.0..1000.0),
        );
        events.push(if r < 0.2 {
            auction(t, &format!("a{k}"), at, 300.0, 60_000.0)
        } else if r < 0.6 {
            ev(
                "UserLocation",
                t,
                vec![("location", Value::Geo(GeoPoint { lat: at.0, lon: at.1 }))],
            )
        } else {
            let v = if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.5..8.0)
            };
            ev("Speed", t, vec![("value", Value::Number(v))])
        });
    }
    Case {
        events,
        beliefs: vec![],
        horizon: t + 1000,
        apply: false,
    }
}

/// Arrival estimate: each auction, given a location and a positive latest
/// speed seen before it, yields distance / speed.
pub fn arrival_ref(case: &Case) -> Vec<Firing> {
    let mut loc = None;
    let mut speed = None;
    let mut out = Vec::new();
    for e in &case.events {
        match e.event_type() {
            "UserLocation" => loc = Some(point(e, "location")),
            "Speed" => speed = Some(number(e, "value")),
            "AuctionOpened" => {
                if let (Some(l), Some(v)) = (loc, speed) {
                    if v > 0.0 {
                        let eta = haversine(point(e, "location"), l) / v;
                        out.push(Firing::new(
                            e.timestamp(),
                            "emit:EstimatedArrival",
                            format!("auctionId={}", text(e, "id")),
                            vec![eta],
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Distinct auctions and arrival estimates for them (or unknown ones).
pub fn nearby_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=200);
    let mut t = 0;
    let mut ids: Vec<String> = Vec::new();
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.random_range(0..20_000);
        if ids.is_empty() || rng.random_bool(0.15) {
            let id = format!("a{}", ids.len());
            let deadline = [100.0, 300.0][rng.random_range(0..2)];
            let interval = [10_000.0, 30_000.0, 60_000.0][rng.random_range(0..3)];
            events.push(auction(t, &id, HOME, deadline, interval));
            ids.push(id);
        } else {
            let i = rng.random_range(0..ids.len() + 1);
            let id = ids.get(i).cloned().unwrap_or_else(|| "ghost".into());
            events.push(ev(
                "EstimatedArrival",
                t,
                vec![
                    ("auctionId", Value::from(id.as_str())),
                    ("estimatedArrivalTime", Value::Number(rng.random_range(0.0..500.0))),
                ],
            ));
        }
    }
    Case {
        events,
        beliefs: vec![],
        horizon: t + 1000,
        apply: true,
    }
}

/// Nearby auction: the first estimate for the auction that beats its
/// pickup deadline and arrives no later than the bidding interval after
/// the opening.
pub fn nearby_ref(case: &Case) -> Vec<Firing> {
    let mut out = Vec::new();
    for (i, a) in case.events.iter().enumerate() {
        if a.event_type() != "AuctionOpened" {
            continue;
        }
        let id = text(a, "id");
        let end = a.timestamp() + number(a, "biddingInterval") as u64;
        let hit = case.events[i + 1..]
            .iter()
            .take_while(|e| e.timestamp() <= end)
            .find(|e| {
                e.event_type() == "EstimatedArrival"
                    && text(e, "auctionId") == id
                    && number(e, "estimatedArrivalTime") < number(a, "pickupDeadline")
            });
        if let Some(e) = hit {
            out.push(Firing::new(
                e.timestamp(),
                "add",
                format!("nearbyAuction({id})"),
                vec![],
            ));
        }
    }
    out
}

/// Every shipped rule with its generator and reference.
pub type Reference = (&'static str, fn(u64) -> Case, fn(&Case) -> Vec<Firing>);

pub const REFERENCES: &[Reference] = &[
    ("Forward plausible GPS data", gps_case, plausible_ref),
    ("Detect movement", gps_case, has_moved_ref),
    ("Compute speed", speed_case, speed_ref),
    ("Compute distance to destination", distance_case, distance_ref),
    ("Detect slow delivery progress", stall_case, stall_ref),
    ("Estimate arrival time at auction", arrival_case, arrival_ref),
    ("Consider bidding", nearby_case, nearby_ref),
];

/// Runs `streams` seeded cases of every reference and returns the number of
/// matched firings, or the first disagreement.
pub fn check_references(streams: u64) -> Result<u64, String> {
    let mut matched = 0;
    for (name, gen, reference) in REFERENCES {
        let rule = corpus_rule(name);
        for seed in 0..streams {
            let case = gen(seed);
            let want = reference(&case);
            matched += want.len() as u64;
            same_firings(run_rule(&rule, &case), want, 1e-9).map_err(|m| format!("{name}, seed {seed}: {m}"))?;
        }
    }
    Ok(matched)
}
