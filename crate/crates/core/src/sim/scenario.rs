use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crowdshipping::{HandoverPolicy, UserProfile, WinnerPolicy};
use crate::event::Timestamp;

use super::trace::{gen_trace, read_trace, Fix, Point, TraceSpec};
use super::{read_json, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    /// CSV path, relative to the scenario file.
    Csv(PathBuf),
    Synthetic(TraceSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    #[serde(default)]
    pub profile: UserProfile,
    pub trace: TraceSource,
    /// Initial beliefs in literal syntax, e.g. `isCycling`.
    #[serde(default)]
    pub beliefs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelSpec {
    pub id: String,
    pub destination: Point,
    pub reward: f64,
    pub holder: String,
    /// When the holder accepts it.
    #[serde(default)]
    pub at_ms: Timestamp,
}

/// A scripted delivery: the current holder receives `ParcelDelivered`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliverySpec {
    pub parcel: String,
    pub at_ms: Timestamp,
}

fn default_tick() -> u64 {
    1000
}

fn default_latency() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    pub duration_ms: u64,
    /// Message delay in ticks.
    #[serde(default = "default_latency")]
    pub latency_ticks: u64,
    #[serde(default)]
    pub policy: WinnerPolicy,
    #[serde(default)]
    pub protocol: HandoverPolicy,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub parcels: Vec<ParcelSpec>,
    #[serde(default)]
    pub deliveries: Vec<DeliverySpec>,
    /// Rule directory replacing the shipped corpus, relative to the
    /// scenario file.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    /// Directory relative paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let mut s: Scenario = read_json(path)?;
        s.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ScenarioInvalid(m));
        if self.tick_ms == 0 {
            return bad("tick_ms must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return bad(format!("duplicate agent id `{}`", a.id));
            }
            let p = &a.profile;
            if [p.min_reward, p.max_pickup_distance, p.reserve, p.detour_cost_rate]
                .iter()
                .any(|x| *x < 0.0 || !x.is_finite())
            {
                return bad(format!("agent `{}` has a negative profile value", a.id));
            }
        }
        if self.policy.arrival_weight < 0.0 {
            return bad("arrival_weight must be non-negative".into());
        }
        let mut parcels = BTreeSet::new();
        for p in &self.parcels {
            if !parcels.insert(p.id.as_str()) {
                return bad(format!("duplicate parcel id `{}`", p.id));
            }
            if !ids.contains(p.holder.as_str()) {
                return bad(format!("parcel `{}` held by unknown agent `{}`", p.id, p.holder));
            }
            if p.reward <= 0.0 {
                return bad(format!("parcel `{}` needs a positive reward", p.id));
            }
            if p.at_ms > self.duration_ms {
                return bad(format!("parcel `{}` is injected after the end", p.id));
            }
        }
        for d in &self.deliveries {
            if !parcels.contains(d.parcel.as_str()) {
                return bad(format!("delivery of unknown parcel `{}`", d.parcel));
            }
            if d.at_ms > self.duration_ms {
                return bad(format!("delivery of `{}` is after the end", d.parcel));
            }
        }
        Ok(())
    }

    /// Loads or generates the agent's trace. The scenario seed shifts the
    /// seed of every synthetic trace.
    pub fn trace(&self, agent: &AgentSpec) -> Result<Vec<Fix>, SimError> {
        match &agent.trace {
            TraceSource::Csv(p) => read_trace(&self.base_dir.join(p)),
            TraceSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = spec.seed.wrapping_add(self.seed.wrapping_mul(1_000_003));
                gen_trace(&spec)
            }
        }
    }
}
