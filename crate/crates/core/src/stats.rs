//! Paired comparisons of plan metrics between two planning variants.
//!
//! Per endpoint: a two-sided Wilcoxon signed-rank test on the per-patient
//! differences `a - b`, a median difference with a percentile bootstrap
//! interval, and Benjamini-Hochberg adjustment within each endpoint family.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::evaluator::{MetricRow, METRIC_IDS};

/// Largest tie-free sample tested with the exact null distribution.
pub const EXACT_MAX_N: usize = 15;
pub const MIN_BOOTSTRAP: usize = 1000;
pub const DEFAULT_BOOTSTRAP: usize = 10_000;
/// FDR level used to call an endpoint significant.
pub const Q_THRESHOLD: f64 = 0.05;

const DEFAULT_FAMILIES: &str = include_str!("../config/endpoint_families.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub endpoint: String,
    pub pairs: Vec<(f64, f64)>,
}

impl PairedSample {
    pub fn new(endpoint: impl Into<String>, pairs: Vec<(f64, f64)>) -> Result<Self, StatsError> {
        let endpoint = endpoint.into();
        if pairs.len() < 2 {
            return Err(StatsError::InvalidArgument(format!("{endpoint}: need at least 2 pairs, got {}", pairs.len())));
        }
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(StatsError::InvalidArgument(format!("{endpoint}: non-finite value")));
        }
        Ok(Self { endpoint, pairs })
    }

    /// Sample whose pairs are `(d, 0)`.
    pub fn from_differences(endpoint: impl Into<String>, diffs: &[f64]) -> Result<Self, StatsError> {
        Self::new(endpoint, diffs.iter().map(|&d| (d, 0.0)).collect())
    }

    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub endpoint: String,
    /// `min(W+, W-)`.
    pub statistic_w: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub n_zero: usize,
    pub method: TestMethod,
}

/// Ranks 1..n of `values` (ascending) with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && values[idx[end]] == values[idx[k]] {
            end += 1;
        }
        let avg = (k + 1 + end) as f64 / 2.0;
        for &i in &idx[k..end] {
            ranks[i] = avg;
        }
        k = end;
    }
    ranks
}

/// Number of subsets of {1..n} with each possible rank sum.
fn rank_sum_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

pub fn wilcoxon_signed_rank(sample: &PairedSample) -> Result<TestResult, StatsError> {
    let diffs = sample.differences();
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n_zero = diffs.len() - nonzero.len();
    let n = nonzero.len();
    if n == 0 {
        return Err(StatsError::DegenerateSample(format!("{}: all differences are zero", sample.endpoint)));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let distinct: BTreeSet<u64> = abs.iter().map(|a| a.to_bits()).collect();
    let ties = distinct.len() < n;
    let (p, method) = if n <= EXACT_MAX_N && !ties {
        let counts = rank_sum_counts(n);
        let k = w.round() as usize;
        let tail: f64 = counts[..=k].iter().sum();
        ((2.0 * tail / 2f64.powi(n as i32)).min(1.0), TestMethod::Exact)
    } else {
        let mean = total / 2.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::standard();
            (2.0 * normal.sf(z)).min(1.0)
        };
        (p, TestMethod::NormalApproximation)
    };
    Ok(TestResult { endpoint: sample.endpoint.clone(), statistic_w: w, p_value: p, n_effective: n, n_zero, method })
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = pos + 1;
        // m / rank >= 1 keeps q >= p exact under rounding
        running = running.min(p_values[i] * (m as f64 / rank as f64)).min(1.0);
        q[i] = running;
    }
    Ok(q)
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub endpoint: String,
    pub median_difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
}

/// Median of `a - b` with a 95% percentile bootstrap interval. Each
/// replicate draws `n` patient indices with `random_range(0..n)` from a
/// ChaCha8 stream seeded with `seed`.
pub fn paired_summary(sample: &PairedSample, n_boot: usize, seed: u64) -> Result<PairedSummary, StatsError> {
    if n_boot < MIN_BOOTSTRAP {
        return Err(StatsError::InvalidArgument(format!("n_boot must be >= {MIN_BOOTSTRAP}, got {n_boot}")));
    }
    let d = sample.differences();
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; n];
    let mut medians = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for slot in buf.iter_mut() {
            *slot = d[rng.random_range(0..n)];
        }
        medians.push(median(&buf));
    }
    medians.sort_by(f64::total_cmp);
    Ok(PairedSummary {
        endpoint: sample.endpoint.clone(),
        median_difference: median(&d),
        ci_low: quantile_sorted(&medians, 0.025),
        ci_high: quantile_sorted(&medians, 0.975),
        n_boot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointFamilies {
    pub primary: Vec<String>,
    pub secondary: Vec<String>,
}

impl Default for EndpointFamilies {
    fn default() -> Self {
        Self::from_json(DEFAULT_FAMILIES).expect("bundled families are valid")
    }
}

impl EndpointFamilies {
    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let f: Self = serde_json::from_str(text).map_err(|e| StatsError::InvalidArgument(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path).map_err(|e| StatsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        let mut seen = BTreeSet::new();
        for e in self.primary.iter().chain(&self.secondary) {
            if !METRIC_IDS.contains(&e.as_str()) {
                return Err(StatsError::InvalidArgument(format!("unknown endpoint {e:?}")));
            }
            if !seen.insert(e) {
                return Err(StatsError::InvalidArgument(format!("endpoint {e:?} listed twice")));
            }
        }
        if self.primary.is_empty() && self.secondary.is_empty() {
            return Err(StatsError::InvalidArgument("no endpoints".into()));
        }
        Ok(())
    }

    fn families(&self) -> [(Family, &[String]); 2] {
        [(Family::Primary, &self.primary), (Family::Secondary, &self.secondary)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Primary,
    Secondary,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointResult {
    pub family: Family,
    pub endpoint: String,
    pub n_pairs: usize,
    pub n_effective: usize,
    pub median_difference: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub statistic_w: Option<f64>,
    pub p_value: f64,
    pub q_value: f64,
    pub significant: bool,
    pub method: Option<TestMethod>,
    /// Test not computable (all differences zero or fewer than 2 pairs);
    /// reported with p = 1.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: Family,
    pub endpoints: Vec<EndpointResult>,
}

impl FamilyResult {
    pub fn significant(&self) -> Vec<&str> {
        self.endpoints.iter().filter(|e| e.significant).map(|e| e.endpoint.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAnalysis {
    pub families: Vec<FamilyResult>,
}

impl FamilyAnalysis {
    pub fn family(&self, family: Family) -> &FamilyResult {
        self.families.iter().find(|f| f.family == family).expect("both families present")
    }

    pub fn rows(&self) -> impl Iterator<Item = &EndpointResult> {
        self.families.iter().flat_map(|f| f.endpoints.iter())
    }

    pub fn endpoint(&self, endpoint: &str) -> Option<&EndpointResult> {
        self.rows().find(|r| r.endpoint == endpoint)
    }
}

type Table = BTreeMap<String, BTreeMap<String, f64>>;

fn index_table(rows: &[MetricRow]) -> Result<Table, StatsError> {
    let mut t: Table = BTreeMap::new();
    for r in rows {
        if t.entry(r.patient.clone()).or_default().insert(r.metric.clone(), r.value).is_some() {
            return Err(StatsError::InvalidArgument(format!("duplicate {} for patient {}", r.metric, r.patient)));
        }
    }
    Ok(t)
}

fn analyze_endpoint(
    family: Family,
    endpoint: &str,
    a: &Table,
    b: &Table,
    n_boot: usize,
    seed: u64,
) -> Result<EndpointResult, StatsError> {
    let pairs: Vec<(f64, f64)> =
        a.iter().filter_map(|(p, ma)| Some((*ma.get(endpoint)?, *b.get(p)?.get(endpoint)?))).collect();
    let mut row = EndpointResult {
        family,
        endpoint: endpoint.to_string(),
        n_pairs: pairs.len(),
        n_effective: 0,
        median_difference: None,
        ci_low: None,
        ci_high: None,
        statistic_w: None,
        p_value: 1.0,
        q_value: 1.0,
        significant: false,
        method: None,
        degenerate: true,
    };
    if pairs.len() < 2 {
        tracing::warn!(endpoint, pairs = pairs.len(), "too few pairs, endpoint reported as degenerate");
        return Ok(row);
    }
    let sample = PairedSample::new(endpoint, pairs)?;
    let summary = paired_summary(&sample, n_boot, seed)?;
    row.median_difference = Some(summary.median_difference);
    row.ci_low = Some(summary.ci_low);
    row.ci_high = Some(summary.ci_high);
    match wilcoxon_signed_rank(&sample) {
        Ok(t) => {
            row.n_effective = t.n_effective;
            row.statistic_w = Some(t.statistic_w);
            row.p_value = t.p_value;
            row.method = Some(t.method);
            row.degenerate = false;
        }
        Err(StatsError::DegenerateSample(msg)) => tracing::warn!(endpoint, "{msg}"),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Tests every endpoint of both families and adjusts p-values within each
/// family separately.
pub fn endpoint_family_analysis(
    table_a: &[MetricRow],
    table_b: &[MetricRow],
    families: &EndpointFamilies,
    n_boot: usize,
    seed: u64,
) -> Result<FamilyAnalysis, StatsError> {
    families.validate()?;
    if n_boot < MIN_BOOTSTRAP {
        return Err(StatsError::InvalidArgument(format!("n_boot must be >= {MIN_BOOTSTRAP}, got {n_boot}")));
    }
    let a = index_table(table_a)?;
    let b = index_table(table_b)?;
    if a.keys().ne(b.keys()) {
        return Err(StatsError::InvalidArgument("tables cover different patient ids".into()));
    }
    let mut out = Vec::new();
    for (family, endpoints) in families.families() {
        let mut rows = endpoints
            .par_iter()
            .enumerate()
            .map(|(k, e)| {
                let s = seed.wrapping_add(((family == Family::Secondary) as u64) << 32).wrapping_add(k as u64);
                analyze_endpoint(family, e, &a, &b, n_boot, s)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ps: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
        for (r, q) in rows.iter_mut().zip(bh_adjust(&ps)?) {
            r.q_value = q;
            r.significant = !r.degenerate && q < Q_THRESHOLD;
        }
        out.push(FamilyResult { family, endpoints: rows });
    }
    Ok(FamilyAnalysis { families: out })
}

pub fn write_results_csv<W: Write>(analysis: &FamilyAnalysis, out: W) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| StatsError::Io(e.to_string());
    w.write_record([
        "family",
        "endpoint",
        "n_pairs",
        "n_effective",
        "median_difference",
        "ci_low",
        "ci_high",
        "statistic_w",
        "p_value",
        "q_value",
        "significant",
        "method",
        "degenerate",
    ])
    .map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in analysis.rows() {
        w.write_record([
            format!("{:?}", r.family).to_lowercase(),
            r.endpoint.clone(),
            r.n_pairs.to_string(),
            r.n_effective.to_string(),
            opt(r.median_difference),
            opt(r.ci_low),
            opt(r.ci_high),
            opt(r.statistic_w),
            r.p_value.to_string(),
            r.q_value.to_string(),
            r.significant.to_string(),
            match r.method {
                Some(TestMethod::Exact) => "exact".into(),
                Some(TestMethod::NormalApproximation) => "normal-approximation".into(),
                None => String::new(),
            },
            r.degenerate.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| StatsError::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotRowKind {
    Point,
    Summary,
}

/// Long-format plot record: a per-patient point or a per-group summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub kind: PlotRowKind,
    pub group: String,
    pub patient: Option<String>,
    pub value: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub n: Option<usize>,
}

/// Per-patient values of `endpoint` for each `(group, table)`, followed by
/// one median and interquartile summary per non-empty group.
pub fn emit_plot_data(tables: &[(&str, &[MetricRow])], endpoint: &str) -> Result<Vec<PlotRow>, StatsError> {
    if !METRIC_IDS.contains(&endpoint) {
        return Err(StatsError::InvalidArgument(format!("unknown endpoint {endpoint:?}")));
    }
    let mut points = Vec::new();
    let mut summaries = Vec::new();
    for (group, rows) in tables {
        let mut vals = Vec::new();
        for r in rows.iter().filter(|r| r.metric == endpoint) {
            vals.push(r.value);
            points.push(PlotRow {
                kind: PlotRowKind::Point,
                group: group.to_string(),
                patient: Some(r.patient.clone()),
                value: Some(r.value),
                median: None,
                q1: None,
                q3: None,
                n: None,
            });
        }
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        summaries.push(PlotRow {
            kind: PlotRowKind::Summary,
            group: group.to_string(),
            patient: None,
            value: None,
            median: Some(quantile_sorted(&vals, 0.5)),
            q1: Some(quantile_sorted(&vals, 0.25)),
            q3: Some(quantile_sorted(&vals, 0.75)),
            n: Some(vals.len()),
        });
    }
    points.extend(summaries);
    Ok(points)
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], out: W) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| StatsError::Io(e.to_string());
    w.write_record(["kind", "group", "patient", "value", "median", "q1", "q3", "n"]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            format!("{:?}", r.kind).to_lowercase(),
            r.group.clone(),
            r.patient.clone().unwrap_or_default(),
            opt(r.value),
            opt(r.median),
            opt(r.q1),
            opt(r.q3),
            r.n.map(|n| n.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| StatsError::Io(e.to_string()))
}

pub fn read_plot_csv<R: Read>(input: R) -> Result<Vec<PlotRow>, StatsError> {
    csv::Reader::from_reader(input).deserialize().collect::<Result<_, _>>().map_err(|e| StatsError::Io(e.to_string()))
}
