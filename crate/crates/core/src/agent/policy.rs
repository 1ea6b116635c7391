//! The policy interface: given a prompt (and, for in-process policies, the
//! structured state behind it) return free-text output containing a plan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::memory::{MemoryEntry, MemoryStore};
use super::parse::PlanSpec;
use super::prompt::CaseSummary;
use crate::evaluator::GoalSet;

pub const DEFAULT_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_TOP_K: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy transport failure: {0}")]
    Transport(String),
    #[error("policy configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub temperature: f64,
    pub top_k: u32,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, top_k: DEFAULT_TOP_K, seed: 0 }
    }
}

/// Structured state the prompt was built from.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub summary: &'a CaseSummary,
    pub goals: &'a GoalSet,
    pub round: u8,
    /// 1-based iteration within the round.
    pub iteration: usize,
    /// 1-based invocation count within the iteration.
    pub attempt: u32,
    pub memory: &'a MemoryStore,
    pub latest: Option<&'a MemoryEntry>,
    /// Plan currently in effect (the one `latest` was produced with, or the
    /// carried-over plan at the start of a round).
    pub current_plan: Option<&'a PlanSpec>,
    pub refinement_text: Option<&'a str>,
    /// Per-invocation seed derived from the session seed.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub prompt: &'a str,
    pub context: PolicyContext<'a>,
}

pub trait PolicyAdapter: Send + Sync {
    /// Identifier recorded in sessions and traces.
    fn name(&self) -> &str;

    fn config(&self) -> &PolicyConfig;

    fn invoke(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError>;
}
