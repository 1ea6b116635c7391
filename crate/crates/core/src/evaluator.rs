//! Dose-volume histograms, plan quality metrics and clinical-goal checks.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{Case, StructureMask, StructureRole, VoxelGrid};
use crate::dose::DoseDistribution;

/// Normal-brain dose level whose volume is reported as `v12_cc`.
pub const V12_THRESHOLD_GY: f64 = 12.0;

const DEFAULT_GOALS_JSON: &str = include_str!("../config/default_goals.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("empty structure: {0}")]
    EmptyStructure(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("invalid goal set: {0}")]
    InvalidGoalSet(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: String,
    pub bin_width_gy: f64,
    /// `cumulative[k]` is the fraction of the structure receiving at least
    /// `k · bin_width_gy`. The last entry lies above the maximum dose.
    pub cumulative: Vec<f64>,
}

impl DvhCurve {
    pub fn threshold(&self, k: usize) -> f64 {
        k as f64 * self.bin_width_gy
    }
}

fn check_mask(dose: &DoseDistribution, mask: &StructureMask) -> Result<(), EvalError> {
    if mask.is_empty() {
        return Err(EvalError::EmptyStructure(mask.name().to_string()));
    }
    if mask.grid_dims() != dose.grid().dims() {
        return Err(EvalError::InvalidArgument(format!("mask {} is not on the dose grid", mask.name())));
    }
    Ok(())
}

/// Cumulative DVH by exact voxel counting.
pub fn compute_dvh(dose: &DoseDistribution, mask: &StructureMask, bin_width_gy: f64) -> Result<DvhCurve, EvalError> {
    check_mask(dose, mask)?;
    if !(bin_width_gy > 0.0 && bin_width_gy.is_finite()) {
        return Err(EvalError::InvalidArgument(format!("bin width must be > 0, got {bin_width_gy}")));
    }
    let doses: Vec<f64> = mask.voxels().iter().map(|&v| dose.get(v as usize)).collect();
    let max = doses.iter().copied().fold(0.0, f64::max);
    let mut top = (max / bin_width_gy).floor() as usize;
    while (top as f64) * bin_width_gy <= max {
        top += 1;
    }
    let mut hist = vec![0usize; top + 1];
    for &d in &doses {
        // largest k with k·bw <= d
        let mut k = (d / bin_width_gy).floor() as usize;
        while k > 0 && (k as f64) * bin_width_gy > d {
            k -= 1;
        }
        while ((k + 1) as f64) * bin_width_gy <= d {
            k += 1;
        }
        hist[k] += 1;
    }
    let n = doses.len() as f64;
    let mut cumulative = vec![0.0; top + 1];
    let mut acc = 0usize;
    for k in (0..=top).rev() {
        acc += hist[k];
        cumulative[k] = acc as f64 / n;
    }
    Ok(DvhCurve { structure: mask.name().to_string(), bin_width_gy, cumulative })
}

fn count_at_least(dose: &DoseDistribution, mask: &StructureMask, level: f64) -> usize {
    mask.voxels().iter().filter(|&&v| dose.get(v as usize) >= level).count()
}

pub fn coverage(dose: &DoseDistribution, ptv: &StructureMask, prescription_gy: f64) -> Result<f64, EvalError> {
    check_mask(dose, ptv)?;
    Ok(100.0 * count_at_least(dose, ptv, prescription_gy) as f64 / ptv.len() as f64)
}

/// Voxel counts behind the conformity indices: (TV, PIV, TV_PIV).
pub fn conformity_counts(
    dose: &DoseDistribution,
    ptv: &StructureMask,
    prescription_gy: f64,
) -> Result<(usize, usize, usize), EvalError> {
    check_mask(dose, ptv)?;
    let piv = dose.values().iter().filter(|&&d| d >= prescription_gy).count();
    Ok((ptv.len(), piv, count_at_least(dose, ptv, prescription_gy)))
}

/// Paddick conformity index `TV_PIV² / (TV · PIV)`; 0 when nothing reaches
/// the prescription.
pub fn conformity_index(dose: &DoseDistribution, ptv: &StructureMask, prescription_gy: f64) -> Result<f64, EvalError> {
    let (tv, piv, tv_piv) = conformity_counts(dose, ptv, prescription_gy)?;
    if piv == 0 {
        return Ok(0.0);
    }
    Ok((tv_piv as f64).powi(2) / (tv as f64 * piv as f64))
}

/// RTOG ratio `PIV / TV`.
pub fn rtog_conformity(dose: &DoseDistribution, ptv: &StructureMask, prescription_gy: f64) -> Result<f64, EvalError> {
    let (tv, piv, _) = conformity_counts(dose, ptv, prescription_gy)?;
    Ok(piv as f64 / tv as f64)
}

/// Paddick gradient index `V(≥ Rx/2) / V(≥ Rx)` over the whole grid.
pub fn gradient_index(dose: &DoseDistribution, prescription_gy: f64) -> Result<f64, EvalError> {
    let v100 = dose.values().iter().filter(|&&d| d >= prescription_gy).count();
    if v100 == 0 {
        return Err(EvalError::UndefinedMetric("no voxel reaches the prescription dose".into()));
    }
    let v50 = dose.values().iter().filter(|&&d| d >= 0.5 * prescription_gy).count();
    Ok(v50 as f64 / v100 as f64)
}

/// Volume (cc) of `brain \ gtv` receiving at least 12 Gy.
pub fn v12_normal_brain(dose: &DoseDistribution, brain: &StructureMask, gtv: &StructureMask) -> Result<f64, EvalError> {
    check_mask(dose, brain)?;
    let normal = brain.difference(gtv).map_err(|e| EvalError::InvalidArgument(e.to_string()))?;
    Ok(count_at_least(dose, &normal, V12_THRESHOLD_GY) as f64 * dose.grid().voxel_volume_cc())
}

pub fn max_dose(dose: &DoseDistribution, mask: &StructureMask) -> Result<f64, EvalError> {
    check_mask(dose, mask)?;
    Ok(mask.voxels().iter().map(|&v| dose.get(v as usize)).fold(0.0, f64::max))
}

/// Plan metrics; serializes as a flat JSON object keyed by metric id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub coverage_pct: f64,
    pub dmax_gy: f64,
    pub ci: f64,
    pub rtog_ci: f64,
    /// Undefined when no voxel reaches the prescription.
    pub gi: Option<f64>,
    pub v12_cc: f64,
    pub brainstem_dmax_gy: Option<f64>,
    pub optic_chiasm_dmax_gy: Option<f64>,
    pub optic_nerve_l_dmax_gy: Option<f64>,
    pub optic_nerve_r_dmax_gy: Option<f64>,
    pub cochlea_l_dmax_gy: Option<f64>,
    pub cochlea_r_dmax_gy: Option<f64>,
}

/// Every metric id a [`MetricsReport`] exposes, in serialization order.
pub const METRIC_IDS: [&str; 12] = [
    "coverage_pct",
    "dmax_gy",
    "ci",
    "rtog_ci",
    "gi",
    "v12_cc",
    "brainstem_dmax_gy",
    "optic_chiasm_dmax_gy",
    "optic_nerve_l_dmax_gy",
    "optic_nerve_r_dmax_gy",
    "cochlea_l_dmax_gy",
    "cochlea_r_dmax_gy",
];

pub fn oar_metric_id(role: StructureRole) -> Option<&'static str> {
    Some(match role {
        StructureRole::Brainstem => "brainstem_dmax_gy",
        StructureRole::OpticChiasm => "optic_chiasm_dmax_gy",
        StructureRole::OpticNerveL => "optic_nerve_l_dmax_gy",
        StructureRole::OpticNerveR => "optic_nerve_r_dmax_gy",
        StructureRole::CochleaL => "cochlea_l_dmax_gy",
        StructureRole::CochleaR => "cochlea_r_dmax_gy",
        StructureRole::Brain => "v12_cc",
        _ => return None,
    })
}

impl MetricsReport {
    pub fn is_known_metric(id: &str) -> bool {
        METRIC_IDS.contains(&id)
    }

    /// Value of a metric; `Ok(None)` when the metric is undefined for this plan.
    pub fn get(&self, id: &str) -> Result<Option<f64>, EvalError> {
        Ok(match id {
            "coverage_pct" => Some(self.coverage_pct),
            "dmax_gy" => Some(self.dmax_gy),
            "ci" => Some(self.ci),
            "rtog_ci" => Some(self.rtog_ci),
            "gi" => self.gi,
            "v12_cc" => Some(self.v12_cc),
            "brainstem_dmax_gy" => self.brainstem_dmax_gy,
            "optic_chiasm_dmax_gy" => self.optic_chiasm_dmax_gy,
            "optic_nerve_l_dmax_gy" => self.optic_nerve_l_dmax_gy,
            "optic_nerve_r_dmax_gy" => self.optic_nerve_r_dmax_gy,
            "cochlea_l_dmax_gy" => self.cochlea_l_dmax_gy,
            "cochlea_r_dmax_gy" => self.cochlea_r_dmax_gy,
            other => return Err(EvalError::InvalidGoalSet(format!("unknown metric id {other:?}"))),
        })
    }

    pub fn oar_dmax(&self, role: StructureRole) -> Option<f64> {
        match oar_metric_id(role) {
            Some(id) if id != "v12_cc" => self.get(id).ok().flatten(),
            _ => None,
        }
    }

    /// `(metric id, value)` for every defined metric.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        METRIC_IDS.iter().filter_map(|&id| self.get(id).ok().flatten().map(|v| (id, v))).collect()
    }
}

/// Computes every metric of a plan on `case`.
pub fn evaluate_plan(dose: &DoseDistribution, case: &Case) -> Result<MetricsReport, EvalError> {
    if dose.grid() != case.grid() {
        return Err(EvalError::InvalidArgument("dose grid does not match case grid".into()));
    }
    let rx = case.prescription_gy();
    let ptv = case.ptv();
    let (tv, piv, tv_piv) = conformity_counts(dose, ptv, rx)?;
    let ci = if piv == 0 { 0.0 } else { (tv_piv as f64).powi(2) / (tv as f64 * piv as f64) };
    let gi = match gradient_index(dose, rx) {
        Ok(g) => Some(g),
        Err(EvalError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let normal = case.normal_brain();
    let v12 = if normal.is_empty() {
        0.0
    } else {
        count_at_least(dose, &normal, V12_THRESHOLD_GY) as f64 * case.grid().voxel_volume_cc()
    };
    let oar = |role| -> Result<Option<f64>, EvalError> {
        match case.by_role(role) {
            Some(m) if !m.is_empty() => max_dose(dose, m).map(Some),
            _ => Ok(None),
        }
    };
    Ok(MetricsReport {
        coverage_pct: 100.0 * tv_piv as f64 / tv as f64,
        dmax_gy: dose.max(),
        ci,
        rtog_ci: piv as f64 / tv as f64,
        gi,
        v12_cc: v12,
        brainstem_dmax_gy: oar(StructureRole::Brainstem)?,
        optic_chiasm_dmax_gy: oar(StructureRole::OpticChiasm)?,
        optic_nerve_l_dmax_gy: oar(StructureRole::OpticNerveL)?,
        optic_nerve_r_dmax_gy: oar(StructureRole::OpticNerveR)?,
        cochlea_l_dmax_gy: oar(StructureRole::CochleaL)?,
        cochlea_r_dmax_gy: oar(StructureRole::CochleaR)?,
    })
}

/// Volume of one voxel, for callers holding only a grid.
pub fn voxel_cc(grid: &VoxelGrid) -> f64 {
    grid.voxel_volume_cc()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    pub fn is_upper_limit(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le)
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default)]
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub goals: Vec<Goal>,
}

impl Default for GoalSet {
    fn default() -> Self {
        Self::from_json(DEFAULT_GOALS_JSON).expect("bundled goal set is valid")
    }
}

impl GoalSet {
    pub fn new(goals: Vec<Goal>) -> Result<Self, EvalError> {
        let s = Self { goals };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let s: GoalSet = serde_json::from_str(text).map_err(|e| EvalError::InvalidGoalSet(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for g in &self.goals {
            if !MetricsReport::is_known_metric(&g.metric) {
                return Err(EvalError::InvalidGoalSet(format!("unknown metric id {:?}", g.metric)));
            }
            if !(g.threshold > 0.0 && g.threshold.is_finite()) {
                return Err(EvalError::InvalidGoalSet(format!("{}: threshold must be > 0", g.metric)));
            }
        }
        Ok(())
    }

    pub fn goal(&self, metric: &str) -> Option<&Goal> {
        self.goals.iter().find(|g| g.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub value: f64,
    pub passed: bool,
}

impl GoalResult {
    /// Relative shortfall `max(0, violation / threshold)`.
    pub fn deficiency(&self) -> f64 {
        let v =
            if self.comparator.is_upper_limit() { self.value - self.threshold } else { self.threshold - self.value };
        (v / self.threshold).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCheck {
    pub results: Vec<GoalResult>,
    pub passed: bool,
}

impl GoalCheck {
    pub fn n_passed(&self) -> usize {
        self.results.iter().filter(|r| r.passed).count()
    }

    pub fn deficiency(&self) -> f64 {
        self.results.iter().map(GoalResult::deficiency).sum()
    }

    pub fn failed(&self) -> impl Iterator<Item = &GoalResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

pub fn check_goals(report: &MetricsReport, goals: &GoalSet) -> Result<GoalCheck, EvalError> {
    let mut results = Vec::with_capacity(goals.goals.len());
    for g in &goals.goals {
        let value = report
            .get(&g.metric)?
            .ok_or_else(|| EvalError::UndefinedMetric(format!("{} is not available for this plan", g.metric)))?;
        results.push(GoalResult {
            metric: g.metric.clone(),
            comparator: g.comparator,
            threshold: g.threshold,
            value,
            passed: g.comparator.holds(value, g.threshold),
        });
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(GoalCheck { results, passed })
}

/// One long-format row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub patient: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(patient: &str, variant: &str, report: &MetricsReport) -> Vec<MetricRow> {
    report
        .entries()
        .into_iter()
        .map(|(metric, value)| MetricRow {
            patient: patient.to_string(),
            variant: variant.to_string(),
            metric: metric.to_string(),
            value,
        })
        .collect()
}

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["patient", "variant", "metric", "value"]).map_err(|e| EvalError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<MetricRow>, EvalError> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(|e| EvalError::Io(e.to_string()))).collect()
}
