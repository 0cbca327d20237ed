//! Event processing language: parser, validator and canonical printer for
//! expectation and interpretation rules.
//!
//! Two surface forms are accepted:
//!
//! ```text
//! // "Detect movement"
//! CONDITION: gps1=GPS -> gps2=GPS
//!     where Geo.distance(gps1, gps2) > 1 meter
//! ACTION: create HasMoved
//! ```
//!
//! and the `SELECT ... FROM pattern [...] WHERE ... ACTION: ...` form. The
//! `CONDITION` form desugars to `SELECT *` and, when no atom carries `every`,
//! puts `every` on the leftmost atom so the rule keeps matching.

mod ast;
mod lexer;
mod parser;
mod printer;
mod ruleset;

use std::fmt;

use thiserror::Error;

pub use ast::*;
pub use parser::{parse_rule, parse_rules};
pub use printer::pretty_print;
pub use ruleset::{validate_ruleset, DependencyEdge, DependencyReport, EdgeKind};

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EplErrorKind {
    #[error("syntax error: {0}")]
    SyntaxError(String),
    #[error("unbound alias `{0}`")]
    UnboundAlias(String),
    #[error("alias `{0}` is bound more than once")]
    DuplicateAlias(String),
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("aggregate over `{0}` is not applied to a windowed pattern")]
    AggregateOutsideWindow(String),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid belief template: {0}")]
    InvalidBeliefTemplate(String),
    #[error("expectation aggregates over the type it filters: {0}")]
    ExpectationFeedback(String),
    #[error("cyclic emission: {}", .0.join(" -> "))]
    CyclicEmission(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EplError {
    pub kind: EplErrorKind,
    pub pos: Option<Pos>,
}

impl EplError {
    pub(crate) fn new(kind: EplErrorKind, pos: Pos) -> Self {
        Self { kind, pos: Some(pos) }
    }

    /// Formats as `file:line:col: message`.
    pub fn diagnostic(&self, file: &str) -> String {
        match self.pos {
            Some(p) => format!("{file}:{p}: {}", self.kind),
            None => format!("{file}: {}", self.kind),
        }
    }
}

impl fmt::Display for EplError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pos {
            Some(p) => write!(f, "{p}: {}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

impl std::error::Error for EplError {}
