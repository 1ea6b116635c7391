#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srsplan_core::agent::parse::render_output;
use srsplan_core::agent::PlanSpec;
use srsplan_core::case::{
    generate_synthetic_case, Case, CaseSpec, SphereSpec, StructureMask, StructureRole, VoxelGrid,
};
use srsplan_core::dose::{compute_influence, BeamSpec, DoseInfluence};
use srsplan_core::optimizer::{Objective, ObjectiveSet};

/// Default anatomy with a 6 mm target well away from every organ at risk.
pub fn fixture_case(id: &str) -> (Case, DoseInfluence) {
    let spec = CaseSpec::with_default_anatomy(id, SphereSpec { center_mm: [22.0, 20.0, 18.0], radius_mm: 6.0 });
    let case = generate_synthetic_case(&spec).unwrap();
    let inf = compute_influence(&case).unwrap();
    (case, inf)
}

/// Cube phantom: brain fills the grid, PTV is a central sphere, brainstem
/// sits below it.
pub fn phantom(beams: Vec<BeamSpec>) -> Case {
    let g = VoxelGrid::centered([17; 3], [2.0; 3]).unwrap();
    let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..g.len()).unwrap();
    let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 4.0).unwrap();
    let oar = StructureMask::sphere("Brainstem", StructureRole::Brainstem, &g, [0.0, 0.0, -10.0], 3.0).unwrap();
    Case::new("phantom", g, vec![brain, ptv, oar], 18.0, beams).unwrap()
}

pub fn phantom_beams() -> Vec<BeamSpec> {
    vec![
        BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 8.0),
        BeamSpec::new([0.0, 1.0, 0.0], [0.0; 3], 8.0),
        BeamSpec::new([0.0, 0.0, 1.0], [0.0, 0.0, 2.0], 8.0),
        BeamSpec::new([-0.6, 0.0, 0.8], [2.0, 0.0, 0.0], 6.0),
    ]
}

pub fn good_plan(case: &Case) -> PlanSpec {
    let rx = case.prescription_gy();
    PlanSpec {
        rings: Vec::new(),
        objectives: ObjectiveSet::new(vec![
            Objective::lower("PTV", rx * 1.04, 100.0, 100),
            Objective::upper("PTV", 21.0, 0.0, 50),
        ]),
    }
}

/// Plan whose target dose sits just below the prescription.
pub fn cold_plan(case: &Case) -> PlanSpec {
    let rx = case.prescription_gy();
    PlanSpec {
        rings: Vec::new(),
        objectives: ObjectiveSet::new(vec![
            Objective::lower("PTV", rx * 0.9, 100.0, 100),
            Objective::upper("PTV", rx * 0.95, 0.0, 100),
        ]),
    }
}

pub fn answer(plan: &PlanSpec) -> String {
    render_output("First, I will set the target objectives.", plan)
}

pub fn labeled_corpus() -> Vec<(String, std::collections::BTreeSet<srsplan_core::traces::CognitiveCategory>)> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/labeled_utterances.csv");
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let labels = rec[1].split(';').map(|l| l.parse().unwrap()).collect();
            (rec[0].to_string(), labels)
        })
        .collect()
}

/// Per-category (precision, recall) of the classifier on the corpus.
pub fn precision_recall(
    corpus: &[(String, std::collections::BTreeSet<srsplan_core::traces::CognitiveCategory>)],
    lexicon: &srsplan_core::traces::MarkerLexicon,
) -> Vec<(srsplan_core::traces::CognitiveCategory, f64, f64)> {
    use srsplan_core::traces::{classify_utterance, CognitiveCategory};
    CognitiveCategory::ALL
        .into_iter()
        .map(|c| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (text, labels) in corpus {
                let got = classify_utterance(text, lexicon).contains(&c);
                let want = labels.contains(&c);
                match (got, want) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
            (c, p, r)
        })
        .collect()
}

pub fn trace_record(
    session: &str,
    case: &str,
    index: usize,
    rationale: &str,
    format_error: bool,
) -> srsplan_core::agent::TraceRecord {
    srsplan_core::agent::TraceRecord {
        session_id: session.into(),
        case_id: case.into(),
        round: 1,
        index,
        attempt: 1,
        prompt_sha256: String::new(),
        raw_output: String::new(),
        rationale: rationale.into(),
        objectives: None,
        metrics: None,
        format_error,
        format_error_detail: None,
        transport_error: None,
        duration_ms: 0,
    }
}

/// Two-sided p by enumerating every sign assignment of the ranks.
pub fn brute_force_p(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = (r + 1) as f64;
    }
    let total: f64 = rank.iter().sum();
    let observed_plus: f64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| rank[i]).sum();
    let observed = observed_plus.min(total - observed_plus);
    let mut extreme = 0u64;
    for mask in 0u32..(1 << n) {
        let plus: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| rank[i]).sum();
        if plus.min(total - plus) <= observed {
            extreme += 1;
        }
    }
    (extreme as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn tie_free(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mags: Vec<f64> = Vec::new();
    while mags.len() < n {
        let m: f64 = rng.random_range(0.01..10.0);
        if !mags.contains(&m) {
            mags.push(m);
        }
    }
    mags.into_iter().map(|m| if rng.random_bool(0.5) { m } else { -m }).collect()
}
