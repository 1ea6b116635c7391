//! Extraction of the structured objective block from free-form policy output.
//!
//! A policy answers with free-text rationale and one fenced block
//! (```` ```json ... ``` ````). The block is either a bare objective array or
//! an object `{"rings": [...], "objectives": [...]}`; rings are optimization
//! structures built around the PTV before the objectives are applied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{Case, StructureRole};
use crate::optimizer::{create_ring, ObjectiveKind, ObjectiveSet, RingSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FormatError {
    #[error("no structured block found")]
    MissingBlock,
    #[error("structured block is not terminated")]
    Truncated,
    #[error("structured block is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingDecl {
    pub name: String,
    pub inner_mm: f64,
    pub outer_mm: f64,
}

/// Objectives plus the ring structures they may reference.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rings: Vec<RingDecl>,
    pub objectives: ObjectiveSet,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Block {
    Bare(ObjectiveSet),
    Full(PlanSpec),
}

impl PlanSpec {
    pub fn ring(&self, name: &str) -> Option<&RingDecl> {
        self.rings.iter().find(|r| r.name == name)
    }

    /// Checks ring declarations and objectives against `case`.
    pub fn validate(&self, case: &Case) -> Result<(), FormatError> {
        let schema = |m: String| Err(FormatError::Schema(m));
        for (i, r) in self.rings.iter().enumerate() {
            if r.name.trim().is_empty() {
                return schema("ring name must not be empty".into());
            }
            if case.structure(&r.name).is_some() {
                return schema(format!("ring name {:?} collides with an existing structure", r.name));
            }
            if self.rings[..i].iter().any(|o| o.name == r.name) {
                return schema(format!("duplicate ring {:?}", r.name));
            }
            RingSpec { inner_margin_mm: r.inner_mm, outer_margin_mm: r.outer_mm }
                .validate()
                .map_err(|e| FormatError::Schema(format!("ring {:?}: {e}", r.name)))?;
        }
        if self.objectives.is_empty() {
            return schema("objective list is empty".into());
        }
        let mut ptv_lower = false;
        for o in self.objectives.iter() {
            o.validate().map_err(|e| FormatError::Schema(e.to_string()))?;
            let role = match case.structure(&o.structure) {
                Some(s) => s.role(),
                None if self.ring(&o.structure).is_some() => StructureRole::Ring,
                None => return schema(format!("unknown structure {:?}", o.structure)),
            };
            ptv_lower |= role == StructureRole::Ptv && o.kind == ObjectiveKind::Lower;
        }
        if !ptv_lower {
            return schema("no lower objective on the PTV".into());
        }
        Ok(())
    }

    /// `case` with every declared ring added as a structure.
    pub fn materialize(&self, case: &Case) -> Result<Case, FormatError> {
        let mut out = case.clone();
        for r in &self.rings {
            let spec = RingSpec { inner_margin_mm: r.inner_mm, outer_margin_mm: r.outer_mm };
            let mask = create_ring(case, spec, &r.name).map_err(|e| FormatError::Schema(e.to_string()))?;
            out = out.with_structure(mask).map_err(|e| FormatError::Schema(e.to_string()))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub plan: PlanSpec,
    pub rationale: String,
}

fn find_ci(hay: &str, needle: &str) -> Option<usize> {
    hay.to_ascii_lowercase().find(&needle.to_ascii_lowercase())
}

/// Splits `text` into (rationale, block body).
fn extract(text: &str) -> Result<(String, &str), FormatError> {
    let (open, body_start) = match find_ci(text, "```json") {
        Some(i) => (i, i + "```json".len()),
        None => match text.find("```") {
            Some(i) => (i, i + 3),
            None => return Err(FormatError::MissingBlock),
        },
    };
    let rest = &text[body_start..];
    let close = rest.find("```").ok_or(FormatError::Truncated)?;
    let body = &rest[..close];
    let after = &rest[close + 3..];
    let rationale = format!("{} {}", text[..open].trim(), after.trim());
    Ok((rationale.trim().to_string(), body))
}

/// Parses one policy answer; structure names are resolved against `case`.
pub fn parse_policy_output(text: &str, case: &Case) -> Result<ParsedOutput, FormatError> {
    let (rationale, body) = extract(text)?;
    let body = body.trim();
    if body.is_empty() {
        return Err(FormatError::InvalidJson("empty block".into()));
    }
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| FormatError::InvalidJson(e.to_string()))?;
    let plan = match serde_json::from_value::<Block>(value) {
        Ok(Block::Bare(objectives)) => PlanSpec { rings: Vec::new(), objectives },
        Ok(Block::Full(plan)) => plan,
        Err(e) => return Err(FormatError::Schema(e.to_string())),
    };
    plan.validate(case)?;
    Ok(ParsedOutput { plan, rationale })
}

/// Renders a policy answer in the expected format.
pub fn render_output(rationale: &str, plan: &PlanSpec) -> String {
    let block = if plan.rings.is_empty() {
        serde_json::to_string_pretty(&plan.objectives)
    } else {
        serde_json::to_string_pretty(plan)
    }
    .expect("plan serializes");
    format!("{}\n\n```json\n{}\n```\n", rationale.trim(), block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{StructureMask, VoxelGrid};
    use crate::optimizer::Objective;

    fn case() -> Case {
        let g = VoxelGrid::centered([21; 3], [2.0; 3]).unwrap();
        let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..g.len()).unwrap();
        let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 5.0).unwrap();
        let bs = StructureMask::sphere("Brainstem", StructureRole::Brainstem, &g, [0.0, 0.0, -12.0], 4.0).unwrap();
        let cl = StructureMask::sphere("CochleaL", StructureRole::CochleaL, &g, [12.0, 0.0, -12.0], 3.0).unwrap();
        Case::new("p", g, vec![brain, ptv, bs, cl], 18.0, vec![]).unwrap()
    }

    fn five() -> PlanSpec {
        PlanSpec {
            rings: vec![],
            objectives: ObjectiveSet::new(vec![
                Objective::lower("PTV", 18.5, 100.0, 80),
                Objective::upper("PTV", 21.0, 0.0, 40),
                Objective::upper("Brainstem", 8.0, 0.0, 30),
                Objective::upper("CochleaL", 5.0, 0.0, 20),
                Objective::upper("Brain", 12.0, 5.0, 10),
            ]),
        }
    }

    #[test]
    fn well_formed_output() {
        let text = render_output("First, I will raise coverage.", &five());
        let p = parse_policy_output(&text, &case()).unwrap();
        assert_eq!(p.plan.objectives.len(), 5);
        assert_eq!(p.rationale, "First, I will raise coverage.");
    }

    #[test]
    fn ring_block_round_trips() {
        let mut plan = five();
        plan.rings.push(RingDecl { name: "Ring_CI".into(), inner_mm: 0.0, outer_mm: 3.0 });
        plan.objectives.0.push(Objective::upper("Ring_CI", 16.0, 0.0, 60));
        let p = parse_policy_output(&render_output("ok", &plan), &case()).unwrap();
        assert_eq!(p.plan, plan);
        let worked = p.plan.materialize(&case()).unwrap();
        assert!(worked.structure("Ring_CI").is_some_and(|s| !s.is_empty()));
    }

    #[test]
    fn truncated_and_missing_blocks() {
        let text = render_output("why", &five());
        let cut = &text[..text.len() - 10];
        assert_eq!(parse_policy_output(cut, &case()), Err(FormatError::Truncated));
        assert_eq!(parse_policy_output("no block here", &case()), Err(FormatError::MissingBlock));
        assert!(matches!(
            parse_policy_output("```json\n[{\"structure\":\n```", &case()),
            Err(FormatError::InvalidJson(_))
        ));
    }

    #[test]
    fn unknown_structure_is_schema_violation() {
        let mut plan = five();
        plan.objectives.0[3].structure = "Cochlea_X".into();
        let err = parse_policy_output(&render_output("x", &plan), &case()).unwrap_err();
        assert!(matches!(err, FormatError::Schema(m) if m.contains("Cochlea_X")));
    }

    #[test]
    fn schema_rules() {
        let no_lower =
            PlanSpec { rings: vec![], objectives: ObjectiveSet::new(vec![Objective::upper("PTV", 20.0, 0.0, 5)]) };
        assert!(matches!(parse_policy_output(&render_output("", &no_lower), &case()), Err(FormatError::Schema(_))));
        let bad_ring = "```json\n{\"rings\":[{\"name\":\"R\",\"inner_mm\":5,\"outer_mm\":3}],\"objectives\":[{\"structure\":\"PTV\",\"kind\":\"lower\",\"dose_gy\":18,\"volume_pct\":100,\"priority\":50}]}\n```";
        assert!(matches!(parse_policy_output(bad_ring, &case()), Err(FormatError::Schema(_))));
        let extra = "```json\n[{\"structure\":\"PTV\",\"kind\":\"lower\",\"dose_gy\":18,\"volume_pct\":100,\"priority\":50,\"x\":1}]\n```";
        assert!(matches!(parse_policy_output(extra, &case()), Err(FormatError::Schema(_))));
        let prio = "```json\n[{\"structure\":\"PTV\",\"kind\":\"lower\",\"dose_gy\":18,\"volume_pct\":100,\"priority\":101}]\n```";
        assert!(matches!(parse_policy_output(prio, &case()), Err(FormatError::Schema(_))));
    }
}
