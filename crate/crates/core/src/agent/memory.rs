//! Append-only record of the plans a session has tried and how they scored.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::parse::PlanSpec;
use crate::evaluator::{GoalCheck, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub round: u8,
    pub iteration: usize,
    pub plan: PlanSpec,
    pub metrics: MetricsReport,
    pub check: GoalCheck,
}

impl MemoryEntry {
    pub fn score(&self) -> PlanScore {
        PlanScore::new(&self.check, &self.metrics)
    }
}

/// Ranking key for plans: more goals passed, then smaller summed relative
/// deficiency, then higher conformity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanScore {
    pub goals_passed: usize,
    pub deficiency: f64,
    pub ci: f64,
}

impl PlanScore {
    pub fn new(check: &GoalCheck, metrics: &MetricsReport) -> Self {
        Self { goals_passed: check.n_passed(), deficiency: check.deficiency(), ci: metrics.ci }
    }

    /// `Greater` when `self` is the better plan.
    pub fn compare(&self, other: &PlanScore) -> Ordering {
        self.goals_passed
            .cmp(&other.goals_passed)
            .then_with(|| other.deficiency.total_cmp(&self.deficiency))
            .then_with(|| self.ci.total_cmp(&other.ci))
    }
}

/// Position of the best score; ties go to the earliest.
pub fn best_position<'a>(scores: impl IntoIterator<Item = &'a PlanScore>) -> Option<usize> {
    let mut best: Option<(usize, &PlanScore)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if s.compare(b) != Ordering::Greater => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryStore {
    entries: Vec<MemoryEntry>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&MemoryEntry> {
        self.entries.last()
    }

    /// The `k` most recent entries, oldest first.
    pub fn recent(&self, k: usize) -> &[MemoryEntry] {
        &self.entries[self.entries.len().saturating_sub(k)..]
    }

    pub fn best(&self) -> Option<&MemoryEntry> {
        let scores: Vec<PlanScore> = self.entries.iter().map(MemoryEntry::score).collect();
        best_position(&scores).map(|i| &self.entries[i])
    }
}
