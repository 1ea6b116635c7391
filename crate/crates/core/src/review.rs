//! Human review of planning sessions.
//!
//! A session waiting for review takes exactly one decision per round:
//! accept (the session is frozen) or refine with a text, which moves it to
//! `Refined` while the refinement round runs and back to `AwaitingReview`
//! when it completes. Sessions, decisions, cases and traces live in a
//! directory store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::trace::{read_jsonl, JsonlTraceWriter, TraceRecord};
use crate::agent::{
    begin_refinement, AgentError, Clock, LoopConfig, Planner, PlanningSession, PolicyAdapter, SessionStatus,
};
use crate::case::Case;
use crate::dose::{compose_dose, compute_influence, compute_influence_cached, DoseInfluence};
use crate::evaluator::{compute_dvh, DvhCurve, GoalResult, GoalSet, MetricsReport};

/// DVH bin width in session details.
pub const DVH_BIN_GY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReviewError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReviewError {
    ReviewError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Refine,
}

/// Decision payload as submitted by a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub refinement_text: Option<String>,
    #[serde(default)]
    pub reviewer_id: Option<String>,
}

impl DecisionRequest {
    pub fn accept() -> Self {
        Self { verdict: Verdict::Accept, refinement_text: None, reviewer_id: None }
    }

    pub fn refine(text: impl Into<String>) -> Self {
        Self { verdict: Verdict::Refine, refinement_text: Some(text.into()), reviewer_id: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub session_id: String,
    /// Round the decision was made on.
    pub round: u8,
    pub verdict: Verdict,
    pub refinement_text: Option<String>,
    pub refinement_text_standard: Option<bool>,
    pub reviewer_id: String,
    pub timestamp_ms: u64,
}

/// Status a decision moves a session to, or why it may not be taken.
/// `rounds` is the number of rounds run so far.
pub fn decide(
    status: SessionStatus,
    rounds: usize,
    verdict: Verdict,
    refinement_text: Option<&str>,
    max_refinements: usize,
) -> Result<SessionStatus, ReviewError> {
    if status != SessionStatus::AwaitingReview {
        return Err(ReviewError::Conflict(format!("session is {status:?}, not awaiting review")));
    }
    match verdict {
        Verdict::Accept => Ok(SessionStatus::Accepted),
        Verdict::Refine => {
            if rounds > max_refinements {
                return Err(ReviewError::Conflict(format!(
                    "refinement limit of {max_refinements} round(s) reached; only accept is possible"
                )));
            }
            if refinement_text.map_or(true, |t| t.trim().is_empty()) {
                return Err(ReviewError::InvalidArgument("refine needs a non-empty refinement_text".into()));
            }
            Ok(SessionStatus::Refined)
        }
    }
}

/// Whether `from -> to` is a transition the session lifecycle allows.
pub fn is_legal_transition(from: SessionStatus, to: SessionStatus) -> bool {
    use SessionStatus::*;
    matches!(
        (from, to),
        (Running, AwaitingReview)
            | (Running, Failed)
            | (AwaitingReview, Accepted)
            | (AwaitingReview, Refined)
            | (Refined, AwaitingReview)
            | (Refined, Failed)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: PlanningSession,
    pub decisions: Vec<ReviewDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub case_id: String,
    pub policy: String,
    pub status: SessionStatus,
    pub round: u8,
    pub created_ms: u64,
    pub selected_iteration: Option<usize>,
    pub metrics: Option<MetricsReport>,
    pub goals: Vec<GoalResult>,
    pub goals_passed: Option<bool>,
    pub error: Option<String>,
}

impl SessionSummary {
    pub fn of(record: &SessionRecord) -> Self {
        let s = &record.session;
        let selected = s.selected();
        Self {
            session_id: s.session_id.clone(),
            case_id: s.case_id.clone(),
            policy: s.policy.clone(),
            status: s.status,
            round: s.current_round().map_or(0, |r| r.round),
            created_ms: s.created_ms,
            selected_iteration: selected.map(|i| i.index),
            metrics: selected.and_then(|i| i.metrics.clone()),
            goals: selected.and_then(|i| i.goal_check.as_ref()).map(|c| c.results.clone()).unwrap_or_default(),
            goals_passed: selected.and_then(|i| i.goal_check.as_ref()).map(|c| c.passed),
            error: s.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDetail {
    pub summary: SessionSummary,
    pub session: PlanningSession,
    pub decisions: Vec<ReviewDecision>,
    /// Cumulative DVHs of the selected plan, one per structure.
    pub dvh: Vec<DvhCurve>,
    pub default_refinement_text: String,
}

/// Directory layout: `sessions/<id>.json`, `traces/<id>.jsonl`,
/// `cases/<case id>.json` and `influence/` for cached dose influence.
#[derive(Debug, Clone)]
pub struct ReviewStore {
    root: PathBuf,
}

fn valid_id(id: &str) -> Result<(), ReviewError> {
    let ok = !id.is_empty()
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(ReviewError::NotFound(format!("invalid id {id:?}")))
    }
}

impl ReviewStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let root = root.into();
        for sub in ["sessions", "traces", "cases", "influence"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    pub fn trace_path(&self, id: &str) -> PathBuf {
        self.root.join("traces").join(format!("{id}.jsonl"))
    }

    fn case_path(&self, id: &str) -> PathBuf {
        self.root.join("cases").join(format!("{id}.json"))
    }

    pub fn influence_dir(&self) -> PathBuf {
        self.root.join("influence")
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReviewError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }

    pub fn save(&self, record: &SessionRecord) -> Result<(), ReviewError> {
        valid_id(&record.session.session_id)?;
        let bytes = serde_json::to_vec_pretty(record).map_err(|e| ReviewError::Io(e.to_string()))?;
        Self::write_atomic(&self.session_path(&record.session.session_id), &bytes)
    }

    pub fn load(&self, id: &str) -> Result<SessionRecord, ReviewError> {
        valid_id(id)?;
        let path = self.session_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ReviewError::NotFound(id.to_string())),
            Err(e) => return Err(io_err(&path, e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| io_err(&path, e))
    }

    /// All sessions, newest first.
    pub fn list(&self) -> Result<Vec<SessionRecord>, ReviewError> {
        let dir = self.root.join("sessions");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
                out.push(serde_json::from_slice::<SessionRecord>(&bytes).map_err(|e| io_err(&path, e))?);
            }
        }
        out.sort_by(|a, b| {
            b.session
                .created_ms
                .cmp(&a.session.created_ms)
                .then_with(|| b.session.session_id.cmp(&a.session.session_id))
        });
        Ok(out)
    }

    pub fn save_case(&self, case: &Case) -> Result<(), ReviewError> {
        valid_id(case.id())?;
        let bytes = serde_json::to_vec(&case.to_file()).map_err(|e| ReviewError::Io(e.to_string()))?;
        Self::write_atomic(&self.case_path(case.id()), &bytes)
    }

    pub fn load_case(&self, id: &str) -> Result<Case, ReviewError> {
        valid_id(id)?;
        let path = self.case_path(id);
        if !path.exists() {
            return Err(ReviewError::NotFound(format!("case {id}")));
        }
        Case::load_json(&path).map_err(|e| io_err(&path, e))
    }

    pub fn traces(&self, id: &str) -> Result<Vec<TraceRecord>, ReviewError> {
        valid_id(id)?;
        let path = self.trace_path(id);
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path).map_err(|e| io_err(&path, e))
    }

    pub fn trace_writer(&self, id: &str) -> Result<JsonlTraceWriter, ReviewError> {
        valid_id(id)?;
        Ok(JsonlTraceWriter::append_to(&self.trace_path(id))?)
    }
}

pub type PolicyRegistry = BTreeMap<String, Arc<dyn PolicyAdapter>>;

/// Review operations over a store. Reads take no locks; decisions on the
/// same session are serialized and the first one wins.
pub struct ReviewService {
    store: ReviewStore,
    goals: GoalSet,
    policies: PolicyRegistry,
    config: LoopConfig,
    clock: Arc<dyn Clock>,
    session_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    influence: Mutex<HashMap<String, Arc<DoseInfluence>>>,
}

impl ReviewService {
    pub fn new(
        store: ReviewStore,
        goals: GoalSet,
        policies: PolicyRegistry,
        config: LoopConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            store,
            goals,
            policies,
            config,
            clock,
            session_locks: Mutex::new(HashMap::new()),
            influence: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &ReviewStore {
        &self.store
    }

    pub fn goals(&self) -> &GoalSet {
        &self.goals
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        self.session_locks.lock().expect("lock map").entry(id.to_string()).or_default().clone()
    }

    fn policy(&self, name: &str) -> Result<Arc<dyn PolicyAdapter>, ReviewError> {
        self.policies
            .get(name)
            .cloned()
            .ok_or_else(|| ReviewError::InvalidArgument(format!("no policy named {name:?} is configured")))
    }

    pub fn influence_for(&self, case: &Case) -> Result<Arc<DoseInfluence>, ReviewError> {
        if let Some(inf) = self.influence.lock().expect("influence cache").get(case.id()) {
            return Ok(inf.clone());
        }
        let inf = Arc::new(
            compute_influence_cached(case, &self.store.influence_dir())
                .or_else(|_| compute_influence(case))
                .map_err(AgentError::from)?,
        );
        self.influence.lock().expect("influence cache").insert(case.id().to_string(), inf.clone());
        Ok(inf)
    }

    /// Runs the first round for `case` with the named policy and stores it.
    pub fn plan_case(&self, case: &Case, policy: &str) -> Result<SessionSummary, ReviewError> {
        let policy = self.policy(policy)?;
        let inf = self.influence_for(case)?;
        self.store.save_case(case)?;
        let planner = Planner::new(case, &inf, &self.goals, policy.as_ref(), self.config.clone(), self.clock.as_ref())?;
        let id = planner.session_id();
        let lock = self.lock_for(&id);
        let _guard = lock.lock().expect("session lock");
        let trace_path = self.store.trace_path(&id);
        if trace_path.exists() {
            fs::remove_file(&trace_path).map_err(|e| io_err(&trace_path, e))?;
        }
        let mut sink = self.store.trace_writer(&id)?;
        let session = planner.run_session(&mut sink)?;
        let record = SessionRecord { session, decisions: Vec::new() };
        self.store.save(&record)?;
        Ok(SessionSummary::of(&record))
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionSummary>, ReviewError> {
        Ok(self.store.list()?.iter().map(SessionSummary::of).collect())
    }

    pub fn get_session(&self, id: &str) -> Result<SessionDetail, ReviewError> {
        let record = self.store.load(id)?;
        let dvh = self.selected_dvh(&record.session)?;
        Ok(SessionDetail {
            summary: SessionSummary::of(&record),
            session: record.session,
            decisions: record.decisions,
            dvh,
            default_refinement_text: self.config.standard_refinement_text.clone(),
        })
    }

    /// DVH curves of the selected plan recomputed from its stored weights.
    pub fn selected_dvh(&self, session: &PlanningSession) -> Result<Vec<DvhCurve>, ReviewError> {
        let Some(sel) = session.selected() else { return Ok(Vec::new()) };
        let (Some(weights), Some(plan)) = (&sel.weights, &sel.plan) else { return Ok(Vec::new()) };
        let case = match self.store.load_case(&session.case_id) {
            Ok(c) => c,
            Err(ReviewError::NotFound(_)) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let working = plan.materialize(&case).map_err(|e| ReviewError::InvalidArgument(e.to_string()))?;
        let inf = self.influence_for(&case)?;
        let dose = compose_dose(&inf, weights).map_err(AgentError::from)?;
        working
            .structures()
            .iter()
            .filter(|m| !m.is_empty())
            .map(|m| compute_dvh(&dose, m, DVH_BIN_GY).map_err(|e| ReviewError::Agent(e.into())))
            .collect()
    }

    /// Records a decision. A refine verdict leaves the session `Refined`;
    /// call [`ReviewService::run_refinement`] to run the round.
    pub fn submit_decision(&self, id: &str, request: &DecisionRequest) -> Result<SessionSummary, ReviewError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().expect("session lock");
        let mut record = self.store.load(id)?;
        let rounds = record.session.rounds.len();
        let next = decide(
            record.session.status,
            rounds,
            request.verdict,
            request.refinement_text.as_deref(),
            self.config.max_refinements,
        )?;
        debug_assert!(is_legal_transition(record.session.status, next));
        let standard_text = &self.config.standard_refinement_text;
        let round = record.session.current_round().map_or(0, |r| r.round);
        let mut standard = None;
        match request.verdict {
            Verdict::Accept => record.session.status = SessionStatus::Accepted,
            Verdict::Refine => {
                let text = request.refinement_text.as_deref().unwrap_or_default();
                begin_refinement(&mut record.session, text, standard_text, self.config.max_refinements)?;
                standard = Some(text == standard_text);
            }
        }
        record.decisions.push(ReviewDecision {
            session_id: id.to_string(),
            round,
            verdict: request.verdict,
            refinement_text: request.refinement_text.clone(),
            refinement_text_standard: standard,
            reviewer_id: request.reviewer_id.clone().unwrap_or_else(|| "anonymous".into()),
            timestamp_ms: self.clock.now_ms(),
        });
        self.store.save(&record)?;
        tracing::info!(session = id, verdict = ?request.verdict, "decision recorded");
        Ok(SessionSummary::of(&record))
    }

    /// Runs the pending refinement round of a `Refined` session.
    pub fn run_refinement(&self, id: &str) -> Result<SessionSummary, ReviewError> {
        let lock = self.lock_for(id);
        let _guard = lock.lock().expect("session lock");
        let mut record = self.store.load(id)?;
        if record.session.status != SessionStatus::Refined {
            return Err(ReviewError::Conflict(format!("session {id} has no pending refinement")));
        }
        let outcome = (|| -> Result<(), ReviewError> {
            let case = self.store.load_case(&record.session.case_id)?;
            let inf = self.influence_for(&case)?;
            let policy = self.policy(&record.session.policy)?;
            let planner =
                Planner::new(&case, &inf, &self.goals, policy.as_ref(), self.config.clone(), self.clock.as_ref())?;
            let mut sink = self.store.trace_writer(id)?;
            planner.run_refinement_round(&mut record.session, &mut sink)?;
            Ok(())
        })();
        if let Err(e) = &outcome {
            tracing::error!(session = id, error = %e, "refinement round failed");
            record.session.status = SessionStatus::Failed;
            record.session.error = Some(e.to_string());
        }
        self.store.save(&record)?;
        outcome.map(|_| SessionSummary::of(&record))
    }
}
