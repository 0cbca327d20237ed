//! Agents with enhanced perception: a rule-driven perception pipeline
//! (expectations filter percepts, interpretations derive context and
//! situations) feeding a belief/plan agent runtime, plus a crowdshipping
//! simulation built on top of both.

pub mod agent;
pub mod belief;
pub mod crowdshipping;
pub mod engine;
pub mod epl;
pub mod event;
pub mod geo;
pub mod sim;
