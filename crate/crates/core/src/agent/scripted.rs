//! Deterministic rule-based policy that needs no model endpoint.
//!
//! Rules, applied to the plan currently in effect:
//! * first call: PTV lower objective at the prescription, a PTV hot-spot cap
//!   and light upper objectives on every organ at risk;
//! * coverage failing: raise the PTV lower dose and priority;
//! * maximum dose failing: lower the PTV upper dose, raise its priority;
//! * V12Gy failing: add (then tighten) a normal-brain ring;
//! * an organ at risk failing: lower its cap and raise its priority;
//! * first call of the refinement round: add a conformity ring.

use super::parse::{render_output, PlanSpec, RingDecl};
use super::policy::{PolicyAdapter, PolicyConfig, PolicyContext, PolicyError, PolicyRequest};
use crate::case::StructureRole;
use crate::evaluator::{oar_metric_id, GoalResult, GoalSet};
use crate::optimizer::{Objective, ObjectiveKind};

pub const CONFORMITY_RING: &str = "Ring_CI";
pub const V12_RING: &str = "Ring_V12";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedStyle {
    /// Step-by-step rationale.
    Reasoning,
    /// One-line rationale.
    Terse,
}

#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    name: String,
    config: PolicyConfig,
    style: ScriptedStyle,
    format_error_rate: f64,
}

impl ScriptedPolicy {
    pub fn new(config: PolicyConfig) -> Self {
        Self { name: "scripted".into(), config, style: ScriptedStyle::Reasoning, format_error_rate: 0.0 }
    }

    /// Terse variant that corrupts its structured block with the given probability.
    pub fn terse(config: PolicyConfig, format_error_rate: f64) -> Self {
        Self {
            name: "scripted-terse".into(),
            config,
            style: ScriptedStyle::Terse,
            format_error_rate: format_error_rate.clamp(0.0, 1.0),
        }
    }

    pub fn style(&self) -> ScriptedStyle {
        self.style
    }

    /// Next plan and the sentences explaining it.
    pub fn decide(&self, ctx: &PolicyContext<'_>) -> (PlanSpec, Vec<String>) {
        let mut notes = Vec::new();
        let Some(current) = ctx.current_plan else {
            return initial_plan(ctx, &mut notes);
        };
        let mut plan = current.clone();
        if ctx.round >= 2 && ctx.iteration == 1 && plan.ring(CONFORMITY_RING).is_none() {
            add_conformity_ring(ctx, &mut plan, &mut notes);
            return (plan, notes);
        }
        let Some(latest) = ctx.latest else {
            notes.push("No plan has been evaluated yet, so I will keep the current objectives.".into());
            return (plan, notes);
        };
        notes.push("First, I will check the latest metrics against each clinical goal.".into());
        if let Some(best) = ctx.memory.best() {
            if best.score().compare(&latest.score()).is_gt() && best.round == ctx.round {
                notes.push(format!(
                    "The previous attempt scored worse than iteration {}, so I am reverting to its objectives and will revise from there.",
                    best.iteration
                ));
                plan = best.plan.clone();
            }
        }
        let failed: Vec<&GoalResult> = latest.check.failed().collect();
        if failed.is_empty() {
            notes.push("All goals are met, so I will keep the objectives unchanged.".into());
            return (plan, notes);
        }
        let coverage_failed = failed.iter().any(|r| r.metric == "coverage_pct");
        let dmax_failed = failed.iter().any(|r| r.metric == "dmax_gy");
        if coverage_failed && dmax_failed {
            notes.push("I need to balance target coverage versus the global hot spot.".into());
        }
        for r in failed {
            match r.metric.as_str() {
                "coverage_pct" => raise_coverage(ctx, &mut plan, r, &mut notes),
                "dmax_gy" => lower_hot_spot(ctx, &mut plan, r, &mut notes),
                "v12_cc" => protect_normal_brain(ctx, &mut plan, r, &mut notes),
                other => {
                    if let Some(role) =
                        StructureRole::SERIAL_OARS.into_iter().find(|&ro| oar_metric_id(ro) == Some(other))
                    {
                        protect_oar(ctx, &mut plan, role, r, &mut notes);
                    }
                }
            }
        }
        (plan, notes)
    }
}

impl PolicyAdapter for ScriptedPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn invoke(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let ctx = &request.context;
        let (plan, notes) = self.decide(ctx);
        let rationale = match self.style {
            ScriptedStyle::Reasoning => notes.join(" "),
            ScriptedStyle::Terse => "Updated objectives.".to_string(),
        };
        let out = render_output(&rationale, &plan);
        if self.format_error_rate > 0.0 && unit_hash(ctx.seed ^ self.config.seed) < self.format_error_rate {
            // drop the closing fence
            let cut = out.trim_end().trim_end_matches('`').trim_end().to_string();
            return Ok(cut);
        }
        Ok(out)
    }
}

/// Deterministic value in [0, 1) from a seed.
fn unit_hash(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn threshold(goals: &GoalSet, metric: &str) -> Option<f64> {
    goals.goal(metric).map(|g| g.threshold)
}

fn ptv_name<'a>(ctx: &PolicyContext<'a>) -> &'a str {
    ctx.summary.name_of(StructureRole::Ptv).unwrap_or("PTV")
}

fn find(plan: &mut PlanSpec, structure: &str, kind: ObjectiveKind) -> Option<usize> {
    plan.objectives.iter().position(|o| o.structure == structure && o.kind == kind)
}

fn initial_plan(ctx: &PolicyContext<'_>, notes: &mut Vec<String>) -> (PlanSpec, Vec<String>) {
    let rx = ctx.summary.prescription_gy;
    let ptv = ptv_name(ctx);
    let cap = threshold(ctx.goals, "dmax_gy").map_or(rx * 1.16, |t| (t * 0.97 * 100.0).round() / 100.0);
    let mut objectives = vec![Objective::lower(ptv, rx, 100.0, 70), Objective::upper(ptv, cap, 0.0, 40)];
    notes.push(format!(
        "I will start by placing a lower objective of {rx:.1} Gy on the {ptv} over its full volume with priority 70."
    ));
    notes.push(format!("Next, I will cap the hot spot with an upper objective of {cap:.2} Gy."));
    let mut protected = Vec::new();
    for role in StructureRole::SERIAL_OARS {
        let (Some(name), Some(id)) = (ctx.summary.name_of(role), oar_metric_id(role)) else { continue };
        if let Some(t) = threshold(ctx.goals, id) {
            objectives.push(Objective::upper(name, (t * 0.6 * 10.0).round() / 10.0, 0.0, 20));
            protected.push(name);
        }
    }
    if !protected.is_empty() {
        notes.push(format!("Then I will add protective upper objectives on {}.", protected.join(", ")));
    }
    notes.push("If coverage falls short then I will raise the target priority in the next iteration.".into());
    (PlanSpec { rings: Vec::new(), objectives: objectives.into_iter().collect() }, std::mem::take(notes))
}

fn add_conformity_ring(ctx: &PolicyContext<'_>, plan: &mut PlanSpec, notes: &mut Vec<String>) {
    let rx = ctx.summary.prescription_gy;
    let dose = (rx * 0.9 * 100.0).round() / 100.0;
    notes.push("The reviewer asked for a more conformal plan.".into());
    notes.push(format!(
        "First, I will add a ring structure {CONFORMITY_RING} covering 0 to 3 mm outside the PTV surface."
    ));
    notes.push(format!(
        "An upper objective of {dose:.2} Gy on the ring with priority 60 is expected to pull the prescription isodose onto the target surface."
    ));
    notes.push(
        "This will result in a higher conformity index, at the cost of a slightly less homogeneous target dose.".into(),
    );
    notes.push("To make sure coverage stays above the goal, I will keep the PTV lower objective unchanged.".into());
    plan.rings.push(RingDecl { name: CONFORMITY_RING.into(), inner_mm: 0.0, outer_mm: 3.0 });
    plan.objectives.0.push(Objective::upper(CONFORMITY_RING, dose, 0.0, 60));
}

fn raise_coverage(ctx: &PolicyContext<'_>, plan: &mut PlanSpec, r: &GoalResult, notes: &mut Vec<String>) {
    let rx = ctx.summary.prescription_gy;
    let ptv = ptv_name(ctx);
    notes.push(format!("Coverage is {:.1}%, below the {} % goal.", r.value, r.threshold));
    let i = match find(plan, ptv, ObjectiveKind::Lower) {
        Some(i) => i,
        None => {
            plan.objectives.0.push(Objective::lower(ptv, rx, 100.0, 70));
            plan.objectives.len() - 1
        }
    };
    let o = &mut plan.objectives.0[i];
    let (old_d, old_p) = (o.dose_gy, o.priority);
    o.dose_gy = ((old_d + 0.35).min(rx * 1.08) * 100.0).round() / 100.0;
    o.priority = (old_p + 10).min(100);
    notes.push(format!(
        "I will raise the PTV lower objective, an increase from {old_d:.2} to {:.2} Gy, with priority going from {old_p} to {}.",
        o.dose_gy, o.priority
    ));
    notes.push("This is expected to lift the coldest target voxels above the prescription.".into());
    if let Some(j) = find(plan, CONFORMITY_RING, ObjectiveKind::Upper) {
        let ring = &mut plan.objectives.0[j];
        let old = ring.dose_gy;
        ring.dose_gy = ((old + 0.3).min(rx * 0.98) * 100.0).round() / 100.0;
        ring.priority = ring.priority.saturating_sub(10).max(20);
        notes.push(format!(
            "The conformity ring competes with coverage, so I will relax it from {old:.2} to {:.2} Gy instead.",
            ring.dose_gy
        ));
    }
}

fn lower_hot_spot(ctx: &PolicyContext<'_>, plan: &mut PlanSpec, r: &GoalResult, notes: &mut Vec<String>) {
    let rx = ctx.summary.prescription_gy;
    let ptv = ptv_name(ctx);
    notes.push(format!("The maximum dose of {:.2} Gy is greater than the {} Gy limit.", r.value, r.threshold));
    let i = match find(plan, ptv, ObjectiveKind::Upper) {
        Some(i) => i,
        None => {
            plan.objectives.0.push(Objective::upper(ptv, r.threshold * 0.97, 0.0, 40));
            plan.objectives.len() - 1
        }
    };
    let o = &mut plan.objectives.0[i];
    let old = o.dose_gy;
    o.dose_gy = ((old - 0.3).max(rx * 1.05) * 100.0).round() / 100.0;
    o.priority = (o.priority + 15).min(100);
    notes.push(format!(
        "I will lower the PTV upper objective from {old:.2} to {:.2} Gy and prioritize it at {} instead of sacrificing coverage.",
        o.dose_gy, o.priority
    ));
}

fn protect_normal_brain(ctx: &PolicyContext<'_>, plan: &mut PlanSpec, r: &GoalResult, notes: &mut Vec<String>) {
    let rx = ctx.summary.prescription_gy;
    notes.push(format!("V12Gy of normal brain is {:.2} cc against a limit of {} cc.", r.value, r.threshold));
    match find(plan, V12_RING, ObjectiveKind::Upper) {
        None => {
            let dose = (rx * 0.6 * 100.0).round() / 100.0;
            plan.rings.push(RingDecl { name: V12_RING.into(), inner_mm: 2.0, outer_mm: 10.0 });
            plan.objectives.0.push(Objective::upper(V12_RING, dose, 0.0, 40));
            notes.push(format!(
                "To make sure V12Gy stays under the limit, I will add a ring from 2 to 10 mm with an upper objective of {dose:.2} Gy."
            ));
        }
        Some(i) => {
            let o = &mut plan.objectives.0[i];
            let old = o.dose_gy;
            o.dose_gy = ((old - 0.5).max(rx * 0.4) * 100.0).round() / 100.0;
            o.priority = (o.priority + 15).min(100);
            notes.push(format!("I will tighten the normal-brain ring from {old:.2} to {:.2} Gy.", o.dose_gy));
        }
    }
    notes.push("This will result in a steeper dose falloff, at the cost of some target homogeneity.".into());
}

fn protect_oar(
    ctx: &PolicyContext<'_>,
    plan: &mut PlanSpec,
    role: StructureRole,
    r: &GoalResult,
    notes: &mut Vec<String>,
) {
    let Some(name) = ctx.summary.name_of(role) else { return };
    notes.push(format!("The {name} maximum of {:.2} Gy would exceed the {} Gy limit.", r.value, r.threshold));
    let target = (r.threshold * 0.75 * 10.0).round() / 10.0;
    match find(plan, name, ObjectiveKind::Upper) {
        Some(i) => {
            let o = &mut plan.objectives.0[i];
            o.dose_gy = (o.dose_gy - 1.0).min(target).max(0.0);
            o.priority = (o.priority + 20).min(100);
            notes.push(format!(
                "I will prioritize {name} by raising its priority to {} with a cap of {:.1} Gy.",
                o.priority, o.dose_gy
            ));
        }
        None => {
            plan.objectives.0.push(Objective::upper(name, target, 0.0, 60));
            notes.push(format!("I will prioritize {name} with an upper objective of {target:.1} Gy."));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_hash_is_uniformish() {
        let n = 10_000;
        let below = (0..n).filter(|&s| unit_hash(s) < 0.25).count();
        assert!((below as f64 / n as f64 - 0.25).abs() < 0.02);
        assert_eq!(unit_hash(7), unit_hash(7));
    }
}
