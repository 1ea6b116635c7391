//! Dose-volume objectives, the penalty they define, and a projected-gradient
//! beam-weight optimizer. Also builds ring structures around the PTV.
//!
//! For an objective on a structure with `n` voxels the penalty is
//! `priority · Σ excess² / n`, summed over the voxels that violate it at its
//! volume level:
//!
//! * upper at `v%`: the hottest `floor(v·n/100)` voxels may exceed the dose;
//!   every other voxel above it is a violator;
//! * lower at `v%`: the hottest `ceil(v·n/100)` voxels must reach the dose;
//!   those below it are violators.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{Case, StructureMask, StructureRole};
use crate::dose::{DoseDistribution, DoseError, DoseInfluence};
use crate::geom;

pub const DEFAULT_MAX_STEPS: usize = 200;
pub const MAX_PRIORITY: u32 = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("invalid objectives: {0}")]
    InvalidObjectives(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Dose(#[from] DoseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Upper,
    Lower,
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Upper => "upper",
            ObjectiveKind::Lower => "lower",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub structure: String,
    pub kind: ObjectiveKind,
    pub dose_gy: f64,
    pub volume_pct: f64,
    pub priority: u32,
}

impl Objective {
    pub fn new(
        structure: impl Into<String>,
        kind: ObjectiveKind,
        dose_gy: f64,
        volume_pct: f64,
        priority: u32,
    ) -> Self {
        Self { structure: structure.into(), kind, dose_gy, volume_pct, priority }
    }

    pub fn upper(structure: impl Into<String>, dose_gy: f64, volume_pct: f64, priority: u32) -> Self {
        Self::new(structure, ObjectiveKind::Upper, dose_gy, volume_pct, priority)
    }

    pub fn lower(structure: impl Into<String>, dose_gy: f64, volume_pct: f64, priority: u32) -> Self {
        Self::new(structure, ObjectiveKind::Lower, dose_gy, volume_pct, priority)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::InvalidObjectives(m));
        if !(self.dose_gy >= 0.0 && self.dose_gy.is_finite()) {
            return bad(format!("{}: dose must be >= 0, got {}", self.structure, self.dose_gy));
        }
        if !(0.0..=100.0).contains(&self.volume_pct) {
            return bad(format!("{}: volume must be in [0, 100], got {}", self.structure, self.volume_pct));
        }
        if self.priority > MAX_PRIORITY {
            return bad(format!("{}: priority must be <= 100, got {}", self.structure, self.priority));
        }
        Ok(())
    }
}

/// Ordered objectives; serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveSet(pub Vec<Objective>);

impl ObjectiveSet {
    pub fn new(objectives: Vec<Objective>) -> Self {
        Self(objectives)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Objective> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks field ranges and that every structure resolves in `case`.
    pub fn validate(&self, case: &Case) -> Result<(), OptimizerError> {
        for o in &self.0 {
            o.validate()?;
            if case.structure(&o.structure).is_none() {
                return Err(OptimizerError::InvalidObjectives(format!("unknown structure {:?}", o.structure)));
            }
        }
        Ok(())
    }

    /// `validate` plus the optimizer precondition of a lower objective on the PTV.
    pub fn validate_for_optimization(&self, case: &Case) -> Result<(), OptimizerError> {
        self.validate(case)?;
        let has_ptv_lower = self.0.iter().any(|o| {
            o.kind == ObjectiveKind::Lower
                && case.structure(&o.structure).is_some_and(|s| s.role() == StructureRole::Ptv)
        });
        if !has_ptv_lower {
            return Err(OptimizerError::InvalidObjectives("no lower objective on the PTV".into()));
        }
        Ok(())
    }
}

impl FromIterator<Objective> for ObjectiveSet {
    fn from_iter<I: IntoIterator<Item = Objective>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Penalty of one objective given the dose of each of its structure's voxels.
/// When `grad` is given, `∂cost/∂dose` is added into it (same indexing).
fn term(obj: &Objective, dose: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = dose.len();
    if n == 0 || obj.priority == 0 {
        return 0.0;
    }
    let p = obj.priority as f64;
    let d = obj.dose_gy;
    let scale = p / n as f64;
    // Voxels ranked hottest first; ties broken by position for determinism.
    let ranked = |k: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dose[b].total_cmp(&dose[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    let mut cost = 0.0;
    let mut grad = grad;
    let mut visit = |i: usize, excess: f64, sign: f64| {
        cost += scale * excess * excess;
        if let Some(g) = grad.as_deref_mut() {
            g[i] += sign * 2.0 * scale * excess;
        }
    };
    match obj.kind {
        ObjectiveKind::Upper => {
            let allowed = ((obj.volume_pct * n as f64 / 100.0) + 1e-9).floor() as usize;
            if allowed == 0 {
                for (i, &x) in dose.iter().enumerate() {
                    if x > d {
                        visit(i, x - d, 1.0);
                    }
                }
            } else if allowed < n {
                let mut exempt = vec![false; n];
                for i in ranked(allowed) {
                    exempt[i] = true;
                }
                for (i, &x) in dose.iter().enumerate() {
                    if !exempt[i] && x > d {
                        visit(i, x - d, 1.0);
                    }
                }
            }
        }
        ObjectiveKind::Lower => {
            let need = ((obj.volume_pct * n as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize;
            if need >= n {
                for (i, &x) in dose.iter().enumerate() {
                    if x < d {
                        visit(i, d - x, -1.0);
                    }
                }
            } else if need > 0 {
                for i in ranked(need) {
                    if dose[i] < d {
                        visit(i, d - dose[i], -1.0);
                    }
                }
            }
        }
    }
    cost
}

fn resolve<'a>(case: &'a Case, objectives: &ObjectiveSet) -> Result<Vec<&'a StructureMask>, OptimizerError> {
    objectives
        .iter()
        .map(|o| {
            case.structure(&o.structure)
                .ok_or_else(|| OptimizerError::InvalidObjectives(format!("unknown structure {:?}", o.structure)))
        })
        .collect()
}

/// Per-objective penalty terms, in objective order.
pub fn objective_terms(
    dose: &DoseDistribution,
    case: &Case,
    objectives: &ObjectiveSet,
) -> Result<Vec<f64>, OptimizerError> {
    if dose.grid() != case.grid() {
        return Err(OptimizerError::InvalidObjectives("dose grid does not match case grid".into()));
    }
    objectives.validate(case)?;
    let masks = resolve(case, objectives)?;
    Ok(objectives
        .iter()
        .zip(masks)
        .map(|(o, m)| {
            let d: Vec<f64> = m.voxels().iter().map(|&v| dose.get(v as usize)).collect();
            term(o, &d, None)
        })
        .collect())
}

pub fn objective_cost(dose: &DoseDistribution, case: &Case, objectives: &ObjectiveSet) -> Result<f64, OptimizerError> {
    Ok(objective_terms(dose, case, objectives)?.iter().sum())
}

/// Influence restricted to the voxels touched by at least one objective.
struct Problem<'a> {
    objectives: &'a ObjectiveSet,
    /// Per objective: positions into the restricted voxel list.
    members: Vec<Vec<usize>>,
    n_local: usize,
    /// Per beam: (local voxel, value).
    columns: Vec<Vec<(u32, f64)>>,
    /// Diagonal curvature estimate per beam.
    hdiag: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(influence: &DoseInfluence, case: &Case, objectives: &'a ObjectiveSet) -> Result<Self, OptimizerError> {
        let masks = resolve(case, objectives)?;
        let n = case.grid().len();
        let mut local = vec![u32::MAX; n];
        let mut n_local = 0u32;
        for m in &masks {
            for &v in m.voxels() {
                local[v as usize] = 0;
            }
        }
        for slot in local.iter_mut() {
            if *slot == 0 {
                *slot = n_local;
                n_local += 1;
            }
        }
        let members: Vec<Vec<usize>> =
            masks.iter().map(|m| m.voxels().iter().map(|&v| local[v as usize] as usize).collect()).collect();
        let columns: Vec<Vec<(u32, f64)>> = influence
            .beams()
            .par_iter()
            .map(|b| {
                b.indices
                    .iter()
                    .zip(&b.values)
                    .filter_map(|(&i, &v)| {
                        let l = local[i as usize];
                        (l != u32::MAX).then_some((l, v))
                    })
                    .collect()
            })
            .collect();
        let mut curvature = vec![0.0; n_local as usize];
        for (o, mem) in objectives.iter().zip(&members) {
            if o.priority == 0 || mem.is_empty() {
                continue;
            }
            let c = 2.0 * o.priority as f64 / mem.len() as f64;
            for &l in mem {
                curvature[l] += c;
            }
        }
        let hdiag =
            columns.par_iter().map(|col| col.iter().map(|&(l, v)| curvature[l as usize] * v * v).sum()).collect();
        Ok(Self { objectives, members, n_local: n_local as usize, columns, hdiag })
    }

    fn dose(&self, w: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.n_local];
        for (col, &wb) in self.columns.iter().zip(w) {
            if wb == 0.0 {
                continue;
            }
            for &(l, v) in col {
                d[l as usize] += wb * v;
            }
        }
        d
    }

    fn cost(&self, dose: &[f64], mut dgrad: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        for (o, mem) in self.objectives.iter().zip(&self.members) {
            let d: Vec<f64> = mem.iter().map(|&l| dose[l]).collect();
            match dgrad.as_deref_mut() {
                Some(g) => {
                    let mut gl = vec![0.0; mem.len()];
                    total += term(o, &d, Some(&mut gl));
                    for (&l, x) in mem.iter().zip(gl) {
                        g[l] += x;
                    }
                }
                None => total += term(o, &d, None),
            }
        }
        total
    }

    fn gradient(&self, dgrad: &[f64]) -> Vec<f64> {
        self.columns.par_iter().map(|col| col.iter().map(|&(l, v)| v * dgrad[l as usize]).sum()).collect()
    }
}

/// Optimizes from unit weights (the calibrated starting plan).
pub fn optimize_weights(
    influence: &DoseInfluence,
    case: &Case,
    objectives: &ObjectiveSet,
    max_steps: usize,
) -> Result<Vec<f64>, OptimizerError> {
    let start = vec![1.0; influence.n_beams()];
    optimize_weights_from(influence, case, objectives, &start, max_steps)
}

/// Diagonally scaled projected-gradient descent from `start` (warm start).
/// A step is accepted when the cost does not increase, otherwise it is halved.
pub fn optimize_weights_from(
    influence: &DoseInfluence,
    case: &Case,
    objectives: &ObjectiveSet,
    start: &[f64],
    max_steps: usize,
) -> Result<Vec<f64>, OptimizerError> {
    if max_steps == 0 {
        return Err(OptimizerError::InvalidSpec("max_steps must be >= 1".into()));
    }
    if influence.case_id() != case.id() || influence.grid() != case.grid() {
        return Err(OptimizerError::InvalidSpec("influence was computed for a different case".into()));
    }
    if start.len() != influence.n_beams() {
        return Err(OptimizerError::InvalidWeights(format!(
            "{} start weights for {} beams",
            start.len(),
            influence.n_beams()
        )));
    }
    if start.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(OptimizerError::InvalidWeights("start weights must be finite and >= 0".into()));
    }
    objectives.validate_for_optimization(case)?;
    let problem = Problem::new(influence, case, objectives)?;
    let mut w = start.to_vec();
    let mut dose = problem.dose(&w);
    let mut dgrad = vec![0.0; problem.n_local];
    let mut cost = problem.cost(&dose, Some(&mut dgrad));
    let mut alpha = 1.0;
    for step in 0..max_steps {
        if cost == 0.0 {
            break;
        }
        let g = problem.gradient(&dgrad);
        let mut accepted = false;
        while alpha > 1e-10 {
            let cand: Vec<f64> = w
                .iter()
                .zip(&g)
                .zip(&problem.hdiag)
                .map(|((&wb, &gb), &h)| if h > 0.0 { (wb - alpha * gb / h).max(0.0) } else { wb })
                .collect();
            if cand == w {
                break;
            }
            let cdose = problem.dose(&cand);
            let ccost = problem.cost(&cdose, None);
            if ccost <= cost {
                w = cand;
                dose = cdose;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            tracing::trace!(step, cost, "optimizer stalled");
            break;
        }
        dgrad.iter_mut().for_each(|x| *x = 0.0);
        cost = problem.cost(&dose, Some(&mut dgrad));
    }
    tracing::debug!(case = case.id(), cost, "optimized weights");
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub inner_margin_mm: f64,
    pub outer_margin_mm: f64,
}

impl RingSpec {
    pub fn new(inner_margin_mm: f64, outer_margin_mm: f64) -> Result<Self, OptimizerError> {
        let s = Self { inner_margin_mm, outer_margin_mm };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.inner_margin_mm >= 0.0
            && self.inner_margin_mm < self.outer_margin_mm
            && self.outer_margin_mm.is_finite())
        {
            return Err(OptimizerError::InvalidSpec(format!(
                "ring margins must satisfy 0 <= inner < outer, got ({}, {})",
                self.inner_margin_mm, self.outer_margin_mm
            )));
        }
        Ok(())
    }
}

/// Voxels whose distance to the PTV surface lies in `(inner, outer]`.
///
/// The PTV surface is represented by the centers of the faces shared between
/// PTV voxels and their non-PTV neighbors; a voxel's distance is the distance
/// from its center to the nearest such face.
pub fn create_ring(case: &Case, spec: RingSpec, name: &str) -> Result<StructureMask, OptimizerError> {
    spec.validate()?;
    let grid = case.grid();
    let ptv = case.ptv();
    let inside = ptv.bitmap(grid);
    let dims = grid.dims();
    let sp = grid.spacing_mm();
    let mut faces: Vec<[f64; 3]> = Vec::new();
    for &v in ptv.voxels() {
        let ijk = grid.ijk(v as usize);
        let c = grid.center(v as usize);
        for a in 0..3 {
            for s in [-1i64, 1] {
                let n = ijk[a] as i64 + s;
                let outside = n < 0 || n >= dims[a] as i64 || {
                    let mut nb = ijk;
                    nb[a] = n as usize;
                    !inside[grid.linear_index(nb)]
                };
                if outside {
                    let mut f = c;
                    f[a] += 0.5 * s as f64 * sp[a];
                    faces.push(f);
                }
            }
        }
    }
    let reach = spec.outer_margin_mm + sp.iter().copied().fold(0.0, f64::max);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &v in ptv.voxels() {
        let ijk = grid.ijk(v as usize);
        for a in 0..3 {
            lo[a] = lo[a].min(ijk[a]);
            hi[a] = hi[a].max(ijk[a]);
        }
    }
    for a in 0..3 {
        let pad = (reach / sp[a]).ceil() as usize + 1;
        lo[a] = lo[a].saturating_sub(pad);
        hi[a] = (hi[a] + pad).min(dims[a] - 1);
    }
    let mut candidates = Vec::new();
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let idx = grid.linear_index([i, j, k]);
                if !inside[idx] {
                    candidates.push(idx);
                }
            }
        }
    }
    let voxels: Vec<usize> = candidates
        .into_par_iter()
        .filter(|&idx| {
            let p = grid.center(idx);
            let d2 = faces.iter().map(|&b| geom::dist2(p, b)).fold(f64::INFINITY, f64::min);
            let d = d2.sqrt();
            d > spec.inner_margin_mm && d <= spec.outer_margin_mm
        })
        .collect();
    StructureMask::new(name, StructureRole::Ring, grid, voxels).map_err(|e| OptimizerError::InvalidSpec(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::VoxelGrid;
    use crate::dose::{compose_dose, compute_influence, BeamSpec};

    fn small_case(beams: Vec<BeamSpec>) -> Case {
        let g = VoxelGrid::centered([17; 3], [2.0; 3]).unwrap();
        let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..g.len()).unwrap();
        let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 4.0).unwrap();
        let oar = StructureMask::sphere("Brainstem", StructureRole::Brainstem, &g, [0.0, 0.0, -10.0], 3.0).unwrap();
        Case::new("small", g, vec![brain, ptv, oar], 18.0, beams).unwrap()
    }

    #[test]
    fn uniform_underdose_cost() {
        let case = small_case(vec![]);
        let dose = DoseDistribution::uniform(case.grid().clone(), 17.0).unwrap();
        let set = ObjectiveSet::new(vec![Objective::lower("PTV", 18.0, 100.0, 50)]);
        assert!((objective_cost(&dose, &case, &set).unwrap() - 50.0).abs() < 1e-12);
        let doubled = ObjectiveSet::new(vec![Objective::lower("PTV", 18.0, 100.0, 100)]);
        assert!((objective_cost(&dose, &case, &doubled).unwrap() - 100.0).abs() < 1e-12);
        let met = ObjectiveSet::new(vec![Objective::lower("PTV", 17.0, 100.0, 50)]);
        assert_eq!(objective_cost(&dose, &case, &met).unwrap(), 0.0);
    }

    #[test]
    fn volume_levels() {
        // 10 voxels: doses 1..=10
        let dose: Vec<f64> = (1..=10).map(f64::from).collect();
        // at most 20% may exceed 7: voxels at 10 and 9 are exempt, 8 violates by 1
        assert!((term(&Objective::upper("s", 7.0, 20.0, 10), &dose, None) - 1.0).abs() < 1e-12);
        // 30% must reach 9: hottest three are 10, 9, 8; only 8 violates by 1
        assert!((term(&Objective::lower("s", 9.0, 30.0, 10), &dose, None) - 1.0).abs() < 1e-12);
        assert_eq!(term(&Objective::lower("s", 9.0, 0.0, 10), &dose, None), 0.0);
        assert_eq!(term(&Objective::upper("s", 0.0, 100.0, 10), &dose, None), 0.0);
    }

    #[test]
    fn unknown_structure_and_missing_ptv_lower() {
        let case = small_case(vec![BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 6.0)]);
        let dose = DoseDistribution::uniform(case.grid().clone(), 1.0).unwrap();
        let bad = ObjectiveSet::new(vec![Objective::lower("Cochlea_X", 1.0, 100.0, 1)]);
        assert!(matches!(objective_cost(&dose, &case, &bad), Err(OptimizerError::InvalidObjectives(_))));
        let inf = compute_influence(&case).unwrap();
        let no_lower = ObjectiveSet::new(vec![Objective::upper("PTV", 20.0, 0.0, 10)]);
        assert!(matches!(optimize_weights(&inf, &case, &no_lower, 10), Err(OptimizerError::InvalidObjectives(_))));
    }

    #[test]
    fn single_beam_reaches_lower_objective() {
        let case = small_case(vec![BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 12.0)]);
        let inf = compute_influence(&case).unwrap();
        let set = ObjectiveSet::new(vec![Objective::lower("PTV", 18.0, 100.0, 50)]);
        let w = optimize_weights_from(&inf, &case, &set, &[0.1], DEFAULT_MAX_STEPS).unwrap();
        // closed form: the smallest weight bringing the coldest PTV voxel to 18 Gy
        let a_min = case.ptv().voxels().iter().map(|&v| inf.beam(0).get(v as usize)).fold(f64::INFINITY, f64::min);
        let w_star = 18.0 / a_min;
        assert!((w[0] - w_star).abs() / w_star < 0.01, "{} vs {}", w[0], w_star);
        let dose = compose_dose(&inf, &w).unwrap();
        let mean = case.ptv().voxels().iter().map(|&v| dose.get(v as usize)).sum::<f64>() / case.ptv().len() as f64;
        assert!(mean >= 18.0 * 0.99);
    }

    #[test]
    fn one_step_never_increases_cost() {
        let beams = vec![
            BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 8.0),
            BeamSpec::new([0.0, 1.0, 0.0], [0.0; 3], 8.0),
            BeamSpec::new([0.0, 0.0, 1.0], [0.0, 0.0, 2.0], 8.0),
        ];
        let case = small_case(beams);
        let inf = compute_influence(&case).unwrap();
        let set = ObjectiveSet::new(vec![
            Objective::lower("PTV", 18.0, 100.0, 80),
            Objective::upper("PTV", 19.0, 0.0, 40),
            Objective::upper("Brainstem", 3.0, 0.0, 60),
        ]);
        let start = vec![1.0; 3];
        let before = objective_cost(&compose_dose(&inf, &start).unwrap(), &case, &set).unwrap();
        let w = optimize_weights_from(&inf, &case, &set, &start, 1).unwrap();
        let after = objective_cost(&compose_dose(&inf, &w).unwrap(), &case, &set).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn zero_priority_terms_vanish() {
        let beams = vec![BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 8.0), BeamSpec::new([0.0, 0.0, 1.0], [0.0; 3], 8.0)];
        let case = small_case(beams);
        let inf = compute_influence(&case).unwrap();
        let only = ObjectiveSet::new(vec![Objective::lower("PTV", 18.0, 100.0, 70)]);
        let padded = ObjectiveSet::new(vec![
            Objective::upper("Brainstem", 1.0, 0.0, 0),
            Objective::lower("PTV", 18.0, 100.0, 70),
            Objective::upper("PTV", 10.0, 0.0, 0),
        ]);
        let a = optimize_weights(&inf, &case, &only, 50).unwrap();
        let b = optimize_weights(&inf, &case, &padded, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ring_validation_and_disjointness() {
        let case = small_case(vec![]);
        assert!(matches!(RingSpec::new(5.0, 3.0), Err(OptimizerError::InvalidSpec(_))));
        assert!(RingSpec::new(-1.0, 3.0).is_err());
        let ring = create_ring(&case, RingSpec::new(0.0, 2.0).unwrap(), "Ring").unwrap();
        assert!(!ring.is_empty());
        assert!(ring.intersection(case.ptv()).unwrap().is_empty());
        assert_eq!(ring.role(), StructureRole::Ring);
    }

    #[test]
    fn ring_shell_volume_at_1mm() {
        let g = VoxelGrid::centered([41; 3], [1.0; 3]).unwrap();
        let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..g.len()).unwrap();
        let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 10.0).unwrap();
        let case = Case::new("shell", g.clone(), vec![brain, ptv], 18.0, vec![]).unwrap();
        let ring = create_ring(&case, RingSpec::new(0.0, 2.0).unwrap(), "Ring").unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * (12f64.powi(3) - 10f64.powi(3)) / 1000.0;
        let v = ring.len() as f64 * g.voxel_volume_cc();
        assert!((v - analytic).abs() / analytic < 0.10, "{v} vs {analytic}");
    }
}
