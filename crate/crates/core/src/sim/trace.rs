//! GPS traces: CSV reading/writing and a seeded synthetic generator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::event::{GeoPoint, Timestamp};
use crate::geo;

use super::SimError;

/// One GPS sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub timestamp_ms: Timestamp,
    pub lat: f64,
    pub lon: f64,
}

impl Fix {
    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

/// Reads a `timestamp_ms,lat,lon` CSV. Errors name the offending line.
pub fn read_trace(path: &Path) -> Result<Vec<Fix>, SimError> {
    let file = std::fs::File::open(path).map_err(|e| SimError::io(path, e))?;
    parse_trace(file, &path.display().to_string())
}

pub fn parse_trace(input: impl std::io::Read, name: &str) -> Result<Vec<Fix>, SimError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out: Vec<Fix> = Vec::new();
    for rec in rdr.deserialize::<Fix>() {
        let fix = rec.map_err(|e| SimError::Trace {
            file: name.to_owned(),
            line: e.position().map_or(0, |p| p.line()),
            message: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        let line = out.len() as u64 + 2;
        if GeoPoint::new(fix.lat, fix.lon).is_err() {
            return Err(SimError::Trace {
                file: name.to_owned(),
                line,
                message: format!("coordinates out of range: {}, {}", fix.lat, fix.lon),
            });
        }
        if out.last().is_some_and(|p| p.timestamp_ms > fix.timestamp_ms) {
            return Err(SimError::Trace {
                file: name.to_owned(),
                line,
                message: "timestamps go backwards".into(),
            });
        }
        out.push(fix);
    }
    Ok(out)
}

/// Writes a trace with fixed formatting so equal traces give equal bytes.
pub fn write_trace(fixes: &[Fix], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "timestamp_ms,lat,lon")?;
    for f in fixes {
        writeln!(out, "{},{:.8},{:.8}", f.timestamp_ms, f.lat, f.lon)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lat: f64,
    pub lon: f64,
}

impl From<Point> for GeoPoint {
    fn from(p: Point) -> Self {
        GeoPoint { lat: p.lat, lon: p.lon }
    }
}

/// A piece of a synthetic route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Leg {
    /// Stand still.
    Stop { stop_s: f64 },
    /// Travel to an absolute point.
    To { to: Point, speed_mps: f64 },
    /// Travel by an offset in meters.
    Offset {
        #[serde(default)]
        east_m: f64,
        #[serde(default)]
        north_m: f64,
        speed_mps: f64,
    },
}

fn default_interval() -> u64 {
    1000
}

fn default_sigma() -> f64 {
    2.0
}

/// Route and sampling parameters for [`gen_trace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    #[serde(default)]
    pub seed: u64,
    pub start: Point,
    #[serde(default)]
    pub start_ms: Timestamp,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    /// Standard deviation of the position noise (m).
    #[serde(default = "default_sigma")]
    pub noise_sigma_m: f64,
    /// Samples are delayed by up to this much (uniform), keeping order.
    #[serde(default)]
    pub jitter_ms: u64,
    #[serde(default)]
    pub legs: Vec<Leg>,
    /// Total length; the user stands still after the last leg. Defaults to
    /// the length of the legs.
    #[serde(default)]
    pub duration_s: Option<f64>,
}

/// Position along the route as a function of elapsed seconds.
struct Route {
    /// (start time s, end time s, from, to); `from == to` for stops.
    pieces: Vec<(f64, f64, GeoPoint, GeoPoint)>,
    end: GeoPoint,
}

impl Route {
    fn new(spec: &TraceSpec) -> Result<Self, SimError> {
        let invalid = |m: String| SimError::ScenarioInvalid(m);
        let mut at: GeoPoint =
            GeoPoint::new(spec.start.lat, spec.start.lon).map_err(|e| invalid(format!("bad start point: {e}")))?;
        let mut t = 0.0;
        let mut pieces = Vec::new();
        for (i, leg) in spec.legs.iter().enumerate() {
            let (to, secs) = match leg {
                Leg::Stop { stop_s } => (at, *stop_s),
                Leg::To { to, speed_mps } => {
                    let to = GeoPoint::new(to.lat, to.lon).map_err(|e| invalid(format!("leg {i}: {e}")))?;
                    (to, geo::distance(at, to) / speed_mps)
                }
                Leg::Offset {
                    east_m,
                    north_m,
                    speed_mps,
                } => (geo::offset(at, *east_m, *north_m), east_m.hypot(*north_m) / speed_mps),
            };
            if !secs.is_finite() || secs < 0.0 {
                return Err(invalid(format!(
                    "leg {i} has no valid duration (speed must be positive)"
                )));
            }
            pieces.push((t, t + secs, at, to));
            t += secs;
            at = to;
        }
        Ok(Self { pieces, end: at })
    }

    fn length_s(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.1)
    }

    fn at(&self, s: f64) -> (GeoPoint, bool) {
        for &(t0, t1, from, to) in &self.pieces {
            if s < t1 {
                if from == to {
                    return (from, true);
                }
                let f = (s - t0) / (t1 - t0);
                let d = geo::distance(from, to) * f;
                return (geo::destination(from, geo::bearing(from, to), d), false);
            }
        }
        (self.end, true)
    }
}

/// Samples the route at a fixed cadence with Gaussian position noise.
/// While the user stands still the last fix is repeated, as a parked
/// receiver would report. Same spec, same output.
pub fn gen_trace(spec: &TraceSpec) -> Result<Vec<Fix>, SimError> {
    if spec.interval_ms == 0 {
        return Err(SimError::ScenarioInvalid("interval_ms must be positive".into()));
    }
    if spec.noise_sigma_m < 0.0 || !spec.noise_sigma_m.is_finite() {
        return Err(SimError::ScenarioInvalid("noise_sigma_m must be non-negative".into()));
    }
    let route = Route::new(spec)?;
    let total_s = spec.duration_s.unwrap_or_else(|| route.length_s());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma_m).expect("sigma validated");
    let total_ms = (total_s * 1000.0).round() as u64;
    let mut out: Vec<Fix> = Vec::new();
    let mut k = 0u64;
    let mut prev_truth = None;
    while k * spec.interval_ms <= total_ms {
        let nominal = k * spec.interval_ms;
        let (truth, still) = route.at(nominal as f64 / 1000.0);
        let jitter = if spec.jitter_ms > 0 {
            rng.random_range(0..spec.jitter_ms)
        } else {
            0
        };
        let at = match out.last() {
            Some(prev) if still && prev_truth == Some(truth) => prev.point(),
            _ => {
                let (e, n) = (noise.sample(&mut rng), noise.sample(&mut rng));
                geo::offset(truth, e, n)
            }
        };
        prev_truth = Some(truth);
        let t = spec.start_ms + nominal + jitter;
        let t = out.last().map_or(t, |p| t.max(p.timestamp_ms + 1));
        out.push(Fix {
            timestamp_ms: t,
            lat: at.lat,
            lon: at.lon,
        });
        k += 1;
    }
    Ok(out)
}
