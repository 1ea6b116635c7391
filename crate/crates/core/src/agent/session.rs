//! Planning sessions and the iteration loop.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::memory::{best_position, MemoryEntry, MemoryStore, PlanScore};
use super::parse::{parse_policy_output, PlanSpec};
use super::policy::{PolicyAdapter, PolicyContext, PolicyError, PolicyRequest};
use super::prompt::{build_prompt, CaseSummary, PromptInput};
use super::trace::{sha256_hex, TraceRecord, TraceSink};
use super::{AgentError, DEFAULT_REFINEMENT_TEXT, DIGEST_K, MAX_ITERATIONS};
use crate::case::Case;
use crate::dose::{compose_dose, DoseInfluence};
use crate::evaluator::{check_goals, evaluate_plan, GoalCheck, GoalSet, MetricsReport};
use crate::optimizer::{optimize_weights_from, DEFAULT_MAX_STEPS};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Clock that never advances; makes traces reproducible byte for byte.
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Running,
    GoalsMet,
    IterationCapReached,
    AwaitingReview,
    Accepted,
    Refined,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundOutcome {
    GoalsMet,
    IterationCapReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based within the round.
    pub index: usize,
    pub prompt: String,
    pub raw_output: String,
    pub plan: Option<PlanSpec>,
    pub format_error: bool,
    pub format_error_detail: Option<String>,
    pub attempts: u32,
    pub rationale: String,
    pub weights: Option<Vec<f64>>,
    pub metrics: Option<MetricsReport>,
    pub goal_check: Option<GoalCheck>,
    pub wall_time_ms: u64,
}

impl IterationRecord {
    pub fn score(&self) -> Option<PlanScore> {
        match (&self.goal_check, &self.metrics) {
            (Some(c), Some(m)) => Some(PlanScore::new(c, m)),
            _ => None,
        }
    }

    pub fn passed(&self) -> bool {
        self.goal_check.as_ref().is_some_and(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u8,
    pub refinement_text: Option<String>,
    /// Whether the refinement text matched the configured standard text.
    pub refinement_text_standard: Option<bool>,
    pub iterations: Vec<IterationRecord>,
    pub outcome: Option<RoundOutcome>,
    pub selected_iteration: Option<usize>,
}

impl RoundRecord {
    fn new(round: u8) -> Self {
        Self {
            round,
            refinement_text: None,
            refinement_text_standard: None,
            iterations: Vec::new(),
            outcome: None,
            selected_iteration: None,
        }
    }

    pub fn iteration(&self, index: usize) -> Option<&IterationRecord> {
        self.iterations.iter().find(|i| i.index == index)
    }

    pub fn selected(&self) -> Option<&IterationRecord> {
        self.selected_iteration.and_then(|i| self.iteration(i))
    }

    pub fn format_errors(&self) -> usize {
        self.iterations.iter().filter(|i| i.format_error).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningSession {
    pub session_id: String,
    pub case_id: String,
    pub policy: String,
    pub created_ms: u64,
    pub seed: u64,
    pub status: SessionStatus,
    pub rounds: Vec<RoundRecord>,
    pub memory: MemoryStore,
    pub error: Option<String>,
}

impl PlanningSession {
    pub fn round(&self, round: u8) -> Option<&RoundRecord> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn current_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    /// Selected plan of the latest completed round.
    pub fn selected(&self) -> Option<&IterationRecord> {
        self.rounds.iter().rev().find_map(RoundRecord::selected)
    }

    pub fn total_iterations(&self) -> usize {
        self.rounds.iter().map(|r| r.iterations.len()).sum()
    }
}

/// Index (1-based) of the best iteration in a round: most goals passed, then
/// smallest summed relative deficiency, then highest CI, then earliest.
pub fn select_best(round: &RoundRecord) -> Result<usize, AgentError> {
    let scored: Vec<(usize, PlanScore)> =
        round.iterations.iter().filter_map(|i| i.score().map(|s| (i.index, s))).collect();
    let scores: Vec<PlanScore> = scored.iter().map(|(_, s)| *s).collect();
    best_position(&scores)
        .map(|p| scored[p].0)
        .ok_or_else(|| AgentError::NoValidPlan(format!("round {} has no successfully parsed iteration", round.round)))
}

/// Moves an `AwaitingReview` session into `Refined`, opening the next round
/// with the refinement text. At most `max_refinements` refinement rounds
/// may follow the first round.
pub fn begin_refinement(
    session: &mut PlanningSession,
    text: &str,
    standard_text: &str,
    max_refinements: usize,
) -> Result<(), AgentError> {
    if session.status != SessionStatus::AwaitingReview {
        return Err(AgentError::Protocol(format!(
            "session {} is {:?}, refinement needs AwaitingReview",
            session.session_id, session.status
        )));
    }
    if session.rounds.is_empty() || session.rounds.len() > max_refinements {
        return Err(AgentError::Protocol(format!(
            "session {} has used its {max_refinements} refinement round(s)",
            session.session_id
        )));
    }
    if text.trim().is_empty() {
        return Err(AgentError::Protocol("refinement text must not be empty".into()));
    }
    let standard = text == standard_text;
    if !standard {
        tracing::warn!(session = %session.session_id, "refinement text differs from the configured standard text");
    }
    let mut round = RoundRecord::new(session.rounds.len() as u8 + 1);
    round.refinement_text = Some(text.to_string());
    round.refinement_text_standard = Some(standard);
    session.rounds.push(round);
    session.status = SessionStatus::Refined;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iterations: usize,
    pub optimizer_steps: usize,
    pub digest_k: usize,
    pub max_transport_failures: u32,
    /// Base delay before retrying a failed transport; doubles per failure.
    pub backoff_ms: u64,
    pub standard_refinement_text: String,
    /// Refinement rounds allowed after the first round.
    pub max_refinements: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iterations: MAX_ITERATIONS,
            optimizer_steps: DEFAULT_MAX_STEPS,
            digest_k: DIGEST_K,
            max_transport_failures: 3,
            backoff_ms: 250,
            standard_refinement_text: DEFAULT_REFINEMENT_TEXT.to_string(),
            max_refinements: 1,
            seed: 0,
        }
    }
}

pub struct Planner<'a> {
    case: &'a Case,
    influence: &'a DoseInfluence,
    goals: &'a GoalSet,
    policy: &'a dyn PolicyAdapter,
    config: LoopConfig,
    clock: &'a dyn Clock,
    summary: CaseSummary,
}

/// Outcome of asking the policy for one iteration's plan.
enum Answer {
    Parsed { raw: String, plan: PlanSpec, rationale: String, attempt: u32, started: u64 },
    Unparsed { raw: String, rationale: String, detail: String, attempts: u32 },
    TransportExhausted(String),
}

impl<'a> Planner<'a> {
    pub fn new(
        case: &'a Case,
        influence: &'a DoseInfluence,
        goals: &'a GoalSet,
        policy: &'a dyn PolicyAdapter,
        config: LoopConfig,
        clock: &'a dyn Clock,
    ) -> Result<Self, AgentError> {
        if config.max_iterations == 0 || config.max_iterations > MAX_ITERATIONS {
            return Err(AgentError::InvalidArgument(format!(
                "max_iterations must be in 1..={MAX_ITERATIONS}, got {}",
                config.max_iterations
            )));
        }
        if config.optimizer_steps == 0 {
            return Err(AgentError::InvalidArgument("optimizer_steps must be >= 1".into()));
        }
        if influence.case_id() != case.id() || influence.grid() != case.grid() {
            return Err(AgentError::InvalidArgument("influence does not belong to this case".into()));
        }
        goals.validate()?;
        Ok(Self { case, influence, goals, policy, config, clock, summary: CaseSummary::from_case(case) })
    }

    pub fn summary(&self) -> &CaseSummary {
        &self.summary
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    /// Deterministic id from case, policy and seed.
    pub fn session_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.case.id().as_bytes());
        h.update([0]);
        h.update(self.policy.name().as_bytes());
        h.update(self.config.seed.to_le_bytes());
        format!("{}-{}", self.case.id(), &hex::encode(h.finalize())[..10])
    }

    fn invocation_seed(&self, round: u8, iteration: usize, attempt: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(self.case.id().as_bytes());
        h.update([round]);
        h.update((iteration as u64).to_le_bytes());
        h.update(attempt.to_le_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn run_session(&self, sink: &mut dyn TraceSink) -> Result<PlanningSession, AgentError> {
        let mut session = PlanningSession {
            session_id: self.session_id(),
            case_id: self.case.id().to_string(),
            policy: self.policy.name().to_string(),
            created_ms: self.clock.now_ms(),
            seed: self.config.seed,
            status: SessionStatus::Running,
            rounds: vec![RoundRecord::new(1)],
            memory: MemoryStore::new(),
            error: None,
        };
        self.run_round(&mut session, sink)?;
        Ok(session)
    }

    /// Runs the second round on a session already moved to `Refined`.
    pub fn run_refinement_round(
        &self,
        session: &mut PlanningSession,
        sink: &mut dyn TraceSink,
    ) -> Result<(), AgentError> {
        if session.status != SessionStatus::Refined
            || session.rounds.len() < 2
            || session.rounds.last().is_some_and(|r| !r.iterations.is_empty())
        {
            return Err(AgentError::Protocol(format!(
                "session {} has no pending refinement round",
                session.session_id
            )));
        }
        if session.case_id != self.case.id() {
            return Err(AgentError::InvalidArgument("session belongs to a different case".into()));
        }
        self.run_round(session, sink)
    }

    /// `begin_refinement` followed by the second round.
    pub fn refine_session(
        &self,
        session: &mut PlanningSession,
        text: &str,
        sink: &mut dyn TraceSink,
    ) -> Result<(), AgentError> {
        begin_refinement(session, text, &self.config.standard_refinement_text, self.config.max_refinements)?;
        self.run_refinement_round(session, sink)
    }

    fn run_round(&self, session: &mut PlanningSession, sink: &mut dyn TraceSink) -> Result<(), AgentError> {
        let r = session.rounds.len() - 1;
        let round_no = session.rounds[r].round;
        let refinement_text = session.rounds[r].refinement_text.clone();
        let (mut current_plan, mut weights, mut latest) = if round_no == 1 {
            (None, vec![1.0; self.influence.n_beams()], None)
        } else {
            let prev = session.rounds[r - 1].selected().ok_or_else(|| {
                AgentError::Protocol("refinement requires a selected plan from the first round".into())
            })?;
            let entry =
                session.memory.entries().iter().find(|e| e.round == round_no - 1 && e.iteration == prev.index).cloned();
            (prev.plan.clone(), prev.weights.clone().unwrap_or_else(|| vec![1.0; self.influence.n_beams()]), entry)
        };
        session.status = SessionStatus::Running;

        for index in 1..=self.config.max_iterations {
            let t0 = self.clock.now_ms();
            let prompt = build_prompt(&PromptInput {
                summary: &self.summary,
                goals: self.goals,
                memory: &session.memory,
                latest: latest.as_ref(),
                round: round_no,
                refinement_text: refinement_text.as_deref(),
                digest_k: self.config.digest_k,
            })?;
            let ctx = |attempt| PolicyContext {
                summary: &self.summary,
                goals: self.goals,
                round: round_no,
                iteration: index,
                attempt,
                memory: &session.memory,
                latest: latest.as_ref(),
                current_plan: current_plan.as_ref(),
                refinement_text: refinement_text.as_deref(),
                seed: self.invocation_seed(round_no, index, attempt),
            };
            let base = TraceRecord {
                session_id: session.session_id.clone(),
                case_id: session.case_id.clone(),
                round: round_no,
                index,
                attempt: 0,
                prompt_sha256: String::new(),
                raw_output: String::new(),
                rationale: String::new(),
                objectives: None,
                metrics: None,
                format_error: false,
                format_error_detail: None,
                transport_error: None,
                duration_ms: 0,
            };
            let answer = self.ask(&prompt, &ctx, &base, sink)?;
            let record = match answer {
                Answer::TransportExhausted(msg) => {
                    session.status = SessionStatus::Failed;
                    session.error = Some(msg);
                    return Ok(());
                }
                Answer::Unparsed { raw, rationale, detail, attempts } => {
                    tracing::info!(case = %session.case_id, round = round_no, index, "iteration skipped after format errors");
                    IterationRecord {
                        index,
                        prompt,
                        raw_output: raw,
                        plan: None,
                        format_error: true,
                        format_error_detail: Some(detail),
                        attempts,
                        rationale,
                        weights: None,
                        metrics: None,
                        goal_check: None,
                        wall_time_ms: self.clock.now_ms().saturating_sub(t0),
                    }
                }
                Answer::Parsed { raw, plan, rationale, attempt, started } => {
                    let working = plan
                        .materialize(self.case)
                        .map_err(|e| AgentError::Protocol(format!("validated plan failed to materialize: {e}")))?;
                    let w = optimize_weights_from(
                        self.influence,
                        &working,
                        &plan.objectives,
                        &weights,
                        self.config.optimizer_steps,
                    )?;
                    let dose = compose_dose(self.influence, &w)?;
                    let metrics = evaluate_plan(&dose, self.case)?;
                    let check = check_goals(&metrics, self.goals)?;
                    sink.append(&TraceRecord {
                        attempt,
                        prompt_sha256: sha256_hex(&self.prompt_for_attempt(&prompt, attempt)),
                        raw_output: raw.clone(),
                        rationale: rationale.clone(),
                        objectives: Some(plan.clone()),
                        metrics: Some(metrics.clone()),
                        duration_ms: self.clock.now_ms().saturating_sub(started),
                        ..base.clone()
                    })?;
                    let entry = MemoryEntry {
                        round: round_no,
                        iteration: index,
                        plan: plan.clone(),
                        metrics: metrics.clone(),
                        check: check.clone(),
                    };
                    session.memory.push(entry.clone());
                    latest = Some(entry);
                    current_plan = Some(plan.clone());
                    weights = w.clone();
                    IterationRecord {
                        index,
                        prompt,
                        raw_output: raw,
                        plan: Some(plan),
                        format_error: false,
                        format_error_detail: None,
                        attempts: attempt,
                        rationale,
                        weights: Some(w),
                        metrics: Some(metrics),
                        goal_check: Some(check),
                        wall_time_ms: self.clock.now_ms().saturating_sub(t0),
                    }
                }
            };
            let passed = record.passed();
            session.rounds[r].iterations.push(record);
            if passed {
                break;
            }
        }

        let round = &mut session.rounds[r];
        match select_best(round) {
            Ok(best) => {
                let passed = round.iteration(best).is_some_and(IterationRecord::passed);
                round.selected_iteration = Some(best);
                round.outcome = Some(if passed { RoundOutcome::GoalsMet } else { RoundOutcome::IterationCapReached });
                session.status = SessionStatus::AwaitingReview;
                tracing::info!(
                    session = %session.session_id,
                    round = round_no,
                    iterations = round.iterations.len(),
                    selected = best,
                    goals_met = passed,
                    "round complete"
                );
            }
            Err(e) => {
                session.status = SessionStatus::Failed;
                session.error = Some(e.to_string());
            }
        }
        Ok(())
    }

    fn prompt_for_attempt(&self, prompt: &str, attempt: u32) -> String {
        if attempt <= 1 {
            prompt.to_string()
        } else {
            format!(
                "{prompt}\nYour previous answer could not be parsed. Answer again with exactly one ```json block that follows the output format.\n"
            )
        }
    }

    /// Invokes the policy with transport retries and one format retry. Every
    /// invocation except a successful parse is logged here; the successful
    /// one is logged by the caller once its metrics exist.
    fn ask<'c>(
        &self,
        prompt: &str,
        ctx: &dyn Fn(u32) -> PolicyContext<'c>,
        base: &TraceRecord,
        sink: &mut dyn TraceSink,
    ) -> Result<Answer, AgentError> {
        let mut attempt = 0u32;
        let mut format_failures = 0u32;
        let mut transport_failures = 0u32;
        loop {
            attempt += 1;
            let text = self.prompt_for_attempt(prompt, format_failures + 1);
            let started = self.clock.now_ms();
            let request = PolicyRequest { prompt: &text, context: ctx(attempt) };
            let result = self.policy.invoke(&request);
            let mut rec = TraceRecord { attempt, prompt_sha256: sha256_hex(&text), ..base.clone() };
            match result {
                Err(PolicyError::Transport(msg)) | Err(PolicyError::Config(msg)) => {
                    transport_failures += 1;
                    rec.transport_error = Some(msg.clone());
                    rec.duration_ms = self.clock.now_ms().saturating_sub(started);
                    sink.append(&rec)?;
                    tracing::warn!(attempt, failures = transport_failures, error = %msg, "policy transport failure");
                    if transport_failures >= self.config.max_transport_failures {
                        return Ok(Answer::TransportExhausted(format!(
                            "policy failed {transport_failures} consecutive times: {msg}"
                        )));
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << (transport_failures - 1).min(10));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Ok(raw) => {
                    transport_failures = 0;
                    match parse_policy_output(&raw, self.case) {
                        Ok(parsed) => {
                            return Ok(Answer::Parsed {
                                raw,
                                plan: parsed.plan,
                                rationale: parsed.rationale,
                                attempt: format_failures + 1,
                                started,
                            })
                            .map(|a| self.renumber(a, attempt));
                        }
                        Err(fe) => {
                            format_failures += 1;
                            let rationale = fallback_rationale(&raw);
                            rec.raw_output = raw.clone();
                            rec.rationale = rationale.clone();
                            rec.format_error = true;
                            rec.format_error_detail = Some(fe.to_string());
                            rec.duration_ms = self.clock.now_ms().saturating_sub(started);
                            sink.append(&rec)?;
                            if format_failures >= 2 {
                                return Ok(Answer::Unparsed {
                                    raw,
                                    rationale,
                                    detail: fe.to_string(),
                                    attempts: attempt,
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    fn renumber(&self, answer: Answer, attempt: u32) -> Answer {
        match answer {
            Answer::Parsed { raw, plan, rationale, started, .. } => {
                Answer::Parsed { raw, plan, rationale, attempt, started }
            }
            other => other,
        }
    }
}

/// Rationale of an unparseable answer: the text before any fence.
fn fallback_rationale(raw: &str) -> String {
    raw.split("```").next().unwrap_or("").trim().to_string()
}
