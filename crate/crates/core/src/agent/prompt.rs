//! Prompt construction for the planning policy.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::memory::{MemoryEntry, MemoryStore};
use super::AgentError;
use crate::case::{structure_volume, Case, StructureRole};
use crate::evaluator::{GoalSet, MetricsReport};
use crate::geom;

pub const SECTION_SCENARIO: &str = "## Clinical scenario";
pub const SECTION_PRESCRIPTION: &str = "## Prescription";
pub const SECTION_GOALS: &str = "## Clinical goals";
pub const SECTION_LATEST: &str = "## Latest plan metrics";
pub const SECTION_MEMORY: &str = "## Memory of previous iterations";
pub const SECTION_REFINEMENT: &str = "## Refinement request";
pub const SECTION_SCHEMA: &str = "## Output format";

/// Anatomy facts shown to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub prescription_gy: f64,
    pub ptv_volume_cc: f64,
    pub ptv_equivalent_radius_mm: f64,
    pub ptv_centroid_mm: [f64; 3],
    /// (structure name, role) for every structure in the case.
    pub structures: Vec<(String, StructureRole)>,
    /// Smallest voxel-center distance from the PTV to each organ at risk.
    pub oar_distances_mm: Vec<(String, f64)>,
}

impl CaseSummary {
    pub fn from_case(case: &Case) -> Self {
        let grid = case.grid();
        let ptv = case.ptv();
        let vol = structure_volume(ptv, grid).unwrap_or(0.0);
        let radius = (vol * 1000.0 * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
        let ptv_pts: Vec<[f64; 3]> = ptv.voxels().iter().map(|&v| grid.center(v as usize)).collect();
        let oar_distances_mm = case
            .structures()
            .iter()
            .filter(|s| StructureRole::SERIAL_OARS.contains(&s.role()) && !s.is_empty())
            .map(|s| {
                let d2 = s
                    .voxels()
                    .iter()
                    .map(|&v| {
                        let p = grid.center(v as usize);
                        ptv_pts.iter().map(|&q| geom::dist2(p, q)).fold(f64::INFINITY, f64::min)
                    })
                    .fold(f64::INFINITY, f64::min);
                (s.name().to_string(), d2.sqrt())
            })
            .collect();
        Self {
            case_id: case.id().to_string(),
            prescription_gy: case.prescription_gy(),
            ptv_volume_cc: vol,
            ptv_equivalent_radius_mm: radius,
            ptv_centroid_mm: case.ptv_centroid(),
            structures: case.structures().iter().map(|s| (s.name().to_string(), s.role())).collect(),
            oar_distances_mm,
        }
    }

    pub fn name_of(&self, role: StructureRole) -> Option<&str> {
        self.structures.iter().find(|(_, r)| *r == role).map(|(n, _)| n.as_str())
    }
}

pub struct PromptInput<'a> {
    pub summary: &'a CaseSummary,
    pub goals: &'a GoalSet,
    pub memory: &'a MemoryStore,
    /// Plan the next answer should start from.
    pub latest: Option<&'a MemoryEntry>,
    pub round: u8,
    pub refinement_text: Option<&'a str>,
    pub digest_k: usize,
}

fn metrics_line(m: &MetricsReport) -> String {
    m.entries().iter().map(|(id, v)| format!("{id}={v:.3}")).collect::<Vec<_>>().join(", ")
}

fn digest_line(e: &MemoryEntry) -> String {
    format!(
        "- round {} iteration {}: goals passed {}/{}; objectives {}; rings {}; metrics: {}",
        e.round,
        e.iteration,
        e.check.n_passed(),
        e.check.results.len(),
        serde_json::to_string(&e.plan.objectives).expect("serializable"),
        serde_json::to_string(&e.plan.rings).expect("serializable"),
        metrics_line(&e.metrics)
    )
}

pub fn build_prompt(input: &PromptInput<'_>) -> Result<String, AgentError> {
    let refinement = match (input.round, input.refinement_text) {
        (1, _) => None,
        (0, _) => return Err(AgentError::Protocol("invalid round 0".into())),
        (_, Some(t)) => Some(t),
        (r, None) => return Err(AgentError::Protocol(format!("round {r} prompt requires refinement text"))),
    };
    let s = input.summary;
    let mut p = String::new();
    p.push_str(
        "You are a radiotherapy treatment planner optimizing a single-fraction stereotactic radiosurgery plan. ",
    );
    p.push_str("Adjust the optimization objectives so that the plan meets every clinical goal.\n\n");

    writeln!(p, "{SECTION_SCENARIO}").unwrap();
    writeln!(p, "Case {}: single brain metastasis.", s.case_id).unwrap();
    writeln!(
        p,
        "PTV volume {:.2} cc (equivalent sphere radius {:.1} mm), centroid at ({:.1}, {:.1}, {:.1}) mm.",
        s.ptv_volume_cc, s.ptv_equivalent_radius_mm, s.ptv_centroid_mm[0], s.ptv_centroid_mm[1], s.ptv_centroid_mm[2]
    )
    .unwrap();
    for (name, d) in &s.oar_distances_mm {
        writeln!(p, "Distance from PTV to {name}: {d:.1} mm.").unwrap();
    }
    let names: Vec<&str> = s.structures.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(p, "Available structures: {}.\n", names.join(", ")).unwrap();

    writeln!(p, "{SECTION_PRESCRIPTION}").unwrap();
    writeln!(p, "{:.1} Gy in a single fraction to the PTV.\n", s.prescription_gy).unwrap();

    writeln!(p, "{SECTION_GOALS}").unwrap();
    for g in &input.goals.goals {
        writeln!(p, "- {} {} {} {}", g.metric, g.comparator, g.threshold, g.units).unwrap();
    }
    p.push('\n');

    if let Some(latest) = input.latest {
        writeln!(p, "{SECTION_LATEST}").unwrap();
        writeln!(p, "From round {} iteration {}: {}", latest.round, latest.iteration, metrics_line(&latest.metrics))
            .unwrap();
        for r in &latest.check.results {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            writeln!(p, "- {} = {:.3} (goal {} {}): {verdict}", r.metric, r.value, r.comparator, r.threshold).unwrap();
        }
        writeln!(p, "Current objectives: {}", serde_json::to_string(&latest.plan).expect("serializable")).unwrap();
        p.push('\n');
    }

    if !input.memory.is_empty() {
        writeln!(p, "{SECTION_MEMORY}").unwrap();
        for e in input.memory.recent(input.digest_k) {
            writeln!(p, "{}", digest_line(e)).unwrap();
        }
        if let Some(best) = input.memory.best() {
            writeln!(p, "Best so far: round {} iteration {}.", best.round, best.iteration).unwrap();
        }
        p.push('\n');
    }

    if let Some(text) = refinement {
        writeln!(p, "{SECTION_REFINEMENT}").unwrap();
        writeln!(p, "{text}\n").unwrap();
    }

    writeln!(p, "{SECTION_SCHEMA}").unwrap();
    p.push_str(
        "Explain your reasoning in plain text, then give the complete objective list in one ```json fenced block. \
         The block is either an array of objectives or an object {\"rings\": [...], \"objectives\": [...]}. \
         Each objective has fields structure (an available structure or a declared ring), kind (\"upper\" or \"lower\"), \
         dose_gy, volume_pct (0-100) and priority (integer 0-100). \
         A ring {\"name\", \"inner_mm\", \"outer_mm\"} is the shell of voxels whose distance to the PTV surface lies in (inner_mm, outer_mm]. \
         Include at least one lower objective on the PTV.\n",
    );
    Ok(p)
}
