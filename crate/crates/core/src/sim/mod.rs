//! Deterministic simulation: scenarios, trace replay, rule checking and
//! synthetic traces.

mod harness;
mod replay;
mod scenario;
mod trace;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agent::AgentError;
use crate::engine::EngineError;

pub use harness::{run, RunOutput, RunReport};
pub use replay::{check_rules, load_rules_dir, replay, replay_events, CheckReport, Injection, ReplayReport};
pub use scenario::{AgentSpec, DeliverySpec, ParcelSpec, Scenario, TraceSource};
pub use trace::{gen_trace, parse_trace, read_trace, write_trace, Fix, Leg, Point, TraceSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("{file}:{line}: {message}")]
    Trace { file: String, line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    /// One `file:line:col: message` line per problem.
    #[error("{}", .0.join("\n"))]
    Rules(Vec<String>),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl SimError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| SimError::Json {
        path: path.to_owned(),
        source,
    })
}
