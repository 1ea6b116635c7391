//! The planning loop: prompt, policy, parse, optimize, evaluate, repeat.
//!
//! A session runs a first round of at most ten iterations that stops as
//! soon as every clinical goal passes, then waits for review. A reviewer may
//! accept the selected plan or request one refinement round, which runs the
//! same loop seeded with the first round's best plan and memory.

pub mod memory;
pub mod parse;
pub mod policy;
pub mod prompt;
pub mod remote;
pub mod replay;
pub mod scripted;
pub mod session;
pub mod trace;

use thiserror::Error;

pub use memory::{MemoryEntry, MemoryStore, PlanScore};
pub use parse::{parse_policy_output, FormatError, ParsedOutput, PlanSpec, RingDecl};
pub use policy::{PolicyAdapter, PolicyConfig, PolicyContext, PolicyError, PolicyRequest};
pub use prompt::{build_prompt, CaseSummary, PromptInput};
pub use remote::{RemotePolicy, RemotePolicyConfig};
pub use replay::ReplayPolicy;
pub use scripted::ScriptedPolicy;
pub use session::{
    begin_refinement, select_best, Clock, FixedClock, IterationRecord, LoopConfig, Planner, PlanningSession,
    RoundOutcome, RoundRecord, SessionStatus, SystemClock,
};
pub use trace::{JsonlTraceWriter, TraceRecord, TraceSink};

use crate::case::CaseError;
use crate::dose::DoseError;
use crate::evaluator::EvalError;
use crate::optimizer::OptimizerError;

/// Hard cap on iterations per round.
pub const MAX_ITERATIONS: usize = 10;
/// Memory digest size in prompts.
pub const DIGEST_K: usize = 5;
/// Standard refinement request used for every case.
pub const DEFAULT_REFINEMENT_TEXT: &str =
    "Improve the conformity of this plan while maintaining target coverage and all organ-at-risk constraints.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no valid plan: {0}")]
    NoValidPlan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Dose(#[from] DoseError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
