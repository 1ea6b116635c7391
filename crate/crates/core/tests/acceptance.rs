//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use common::oracle::{check_metrics, random_dose};
use common::{
    answer, brute_force_p, cold_plan, fixture_case, good_plan, labeled_corpus, precision_recall, tie_free, trace_record,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsplan_core::agent::trace::to_jsonl;
use srsplan_core::agent::*;
use srsplan_core::case::{generate_cohort, CohortSpec, StructureMask, StructureRole, VoxelGrid};
use srsplan_core::dose::{compute_influence, DoseDistribution};
use srsplan_core::evaluator::*;
use srsplan_core::geom::dist2;
use srsplan_core::review::*;
use srsplan_core::stats::*;
use srsplan_core::traces::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut voxels = 0usize;
    for seed in 1000..1050 {
        let r = random_dose(seed);
        voxels += r.grid.len();
        check_metrics(&r).map_err(|e| format!("dose {seed}: {e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("runtime {secs:.1} s"))?;
    Ok(format!("50 doses, {voxels} voxels, all counts equal, {secs:.1} s"))
}

fn analytic_ci() -> Outcome {
    let g = VoxelGrid::centered([64; 3], [1.0; 3]).unwrap();
    let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 10.0).unwrap();
    let shell = |r: f64| {
        let v = (0..g.len()).map(|i| if dist2(g.center(i), [0.0; 3]) <= r * r { 18.0 } else { 9.0 }).collect();
        DoseDistribution::new(g.clone(), v).unwrap()
    };
    let exact = conformity_index(&shell(10.0), &ptv, 18.0).unwrap();
    let double = conformity_index(&shell(10.0 * 2f64.cbrt()), &ptv, 18.0).unwrap();
    ensure(exact == 1.0, format!("PIV = PTV gives {exact}"))?;
    ensure((double - 0.5).abs() <= 0.02, format!("double PIV gives {double}"))?;
    Ok(format!("CI {exact} and {double:.4}"))
}

fn exact_wilcoxon() -> Outcome {
    let mut worst = 0.0f64;
    for k in 0..200u64 {
        let n = 1 + (k as usize % 12);
        let d = tie_free(n, 7_000 + k);
        let padded = if n == 1 { vec![d[0], 0.0] } else { d.clone() };
        let t =
            wilcoxon_signed_rank(&PairedSample::from_differences("x", &padded).unwrap()).map_err(|e| e.to_string())?;
        ensure(t.method == TestMethod::Exact, format!("sample {k} used {:?}", t.method))?;
        worst = worst.max((t.p_value - brute_force_p(&d)).abs());
    }
    ensure(worst < 1e-12, format!("max deviation {worst:e}"))?;
    let p = wilcoxon_signed_rank(&PairedSample::from_differences("x", &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap())
        .unwrap()
        .p_value;
    ensure((p - 0.0625).abs() < 1e-15, format!("[1..5] gives {p}"))?;
    Ok(format!("200 samples, max deviation {worst:e}; [1..5] p = {p}"))
}

/// Step-up adjustment written out directly from its definition.
fn bh_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| p[j] >= p[i])
                .map(|j| {
                    let rj = p.iter().filter(|&&x| x <= p[j]).count();
                    p[j] * m as f64 / rj as f64
                })
                .fold(1.0, f64::min)
        })
        .collect()
}

fn bh() -> Outcome {
    let q = bh_adjust(&[0.01, 0.02, 0.03, 0.04]).map_err(|e| e.to_string())?;
    ensure(q.iter().all(|&x| (x - 0.04).abs() < 1e-15), format!("{q:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let m = rng.random_range(1..30);
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let q = bh_adjust(&p).map_err(|e| e.to_string())?;
        let want = bh_oracle(&p);
        for i in 0..m {
            ensure((q[i] - want[i]).abs() < 1e-12, format!("trial {trial}: q {} vs {}", q[i], want[i]))?;
            ensure(q[i] >= p[i] && q[i] <= 1.0, format!("trial {trial}: bounds q {:e} p {:e}", q[i], p[i]))?;
            for j in 0..m {
                ensure(p[i] > p[j] || q[i] <= q[j] + 1e-15, format!("trial {trial}: monotonicity"))?;
            }
        }
    }
    let fams = EndpointFamilies::default();
    ensure(fams.primary.len() == 4 && fams.secondary.len() == 7, "family sizes")?;
    let a = fixture("metrics_agent.csv");
    let b = fixture("metrics_human.csv");
    let res = endpoint_family_analysis(&a, &b, &fams, MIN_BOOTSTRAP, 3).map_err(|e| e.to_string())?;
    for f in &res.families {
        let ps: Vec<f64> = f.endpoints.iter().map(|e| e.p_value).collect();
        let qs: Vec<f64> = f.endpoints.iter().map(|e| e.q_value).collect();
        ensure(bh_adjust(&ps).unwrap() == qs, format!("{:?} adjusted outside its family", f.family))?;
    }
    Ok("[0.01..0.04] -> 0.04; 1000 random vectors match step-up; families 4 + 7 adjusted separately".into())
}

fn fixture(name: &str) -> Vec<MetricRow> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    read_metrics_csv(std::fs::File::open(path).unwrap()).unwrap()
}

fn loop_config() -> LoopConfig {
    LoopConfig { backoff_ms: 0, seed: 11, ..Default::default() }
}

fn loop_semantics() -> Outcome {
    let goals = GoalSet::default();
    let run = |id: &str, plans: &dyn Fn(&srsplan_core::case::Case) -> Vec<String>| {
        let (case, inf) = fixture_case(id);
        let policy = ReplayPolicy::from_texts("fixture", plans(&case));
        let planner = Planner::new(&case, &inf, &goals, &policy, loop_config(), &FixedClock(0)).unwrap();
        planner.run_session(&mut Vec::new()).unwrap()
    };

    let a = run("acc-a", &|c| vec![answer(&good_plan(c))]);
    let ra = a.round(1).unwrap();
    ensure(ra.iterations.len() == 1 && ra.outcome == Some(RoundOutcome::GoalsMet), "immediate satisfaction")?;

    let b = run("acc-b", &|c| vec![answer(&cold_plan(c))]);
    let rb = b.round(1).unwrap();
    ensure(rb.iterations.len() == MAX_ITERATIONS, format!("cap fixture ran {} iterations", rb.iterations.len()))?;
    ensure(rb.outcome == Some(RoundOutcome::IterationCapReached), "cap outcome")?;
    let best = rb.selected().ok_or("no selection")?.score().unwrap();
    ensure(
        rb.iterations.iter().all(|it| best.compare(&it.score().unwrap()).is_ge()),
        "selection is not the best plan",
    )?;

    let c = run("acc-c", &|c| {
        vec![answer(&cold_plan(c)), answer(&cold_plan(c)), answer(&good_plan(c)), answer(&cold_plan(c))]
    });
    let rc = c.round(1).unwrap();
    ensure(
        rc.iterations.len() == 3 && rc.selected_iteration == Some(3),
        format!("converge fixture ran {}", rc.iterations.len()),
    )?;

    let (case, inf) = fixture_case("acc-d");
    let trace = || {
        let policy = ScriptedPolicy::new(PolicyConfig::default());
        let planner =
            Planner::new(&case, &inf, &goals, &policy, loop_config(), &FixedClock(1_700_000_000_000)).unwrap();
        let mut t = Vec::new();
        let mut s = planner.run_session(&mut t).unwrap();
        planner.refine_session(&mut s, DEFAULT_REFINEMENT_TEXT, &mut t).unwrap();
        to_jsonl(&t)
    };
    let (t1, t2) = (trace(), trace());
    ensure(!t1.is_empty() && t1 == t2, "trace logs differ across reruns")?;
    Ok(format!("1 / {} / 3 iterations; {} trace bytes identical", MAX_ITERATIONS, t1.len()))
}

struct CohortRun {
    ci1: Vec<f64>,
    ci2: Vec<f64>,
    passed: usize,
    plan_secs: f64,
    refine_secs: f64,
}

fn run_cohort() -> CohortRun {
    let cases = generate_cohort(&CohortSpec::default(), 20, 42).unwrap();
    let goals = GoalSet::default();
    let policy = ScriptedPolicy::new(PolicyConfig::default());
    let clock = FixedClock(0);
    let mut run = CohortRun { ci1: Vec::new(), ci2: Vec::new(), passed: 0, plan_secs: 0.0, refine_secs: 0.0 };
    for case in &cases {
        let t0 = Instant::now();
        let inf = compute_influence(case).unwrap();
        let planner = Planner::new(
            case,
            &inf,
            &goals,
            &policy,
            LoopConfig { backoff_ms: 0, seed: 7, ..Default::default() },
            &clock,
        )
        .unwrap();
        let mut sink: Vec<TraceRecord> = Vec::new();
        let mut s = planner.run_session(&mut sink).unwrap();
        run.plan_secs += t0.elapsed().as_secs_f64();
        let r1 = s.round(1).unwrap();
        let sel = r1.selected().unwrap();
        if sel.passed() && r1.iterations.len() <= MAX_ITERATIONS {
            run.passed += 1;
        }
        run.ci1.push(sel.metrics.as_ref().unwrap().ci);
        let t1 = Instant::now();
        planner.refine_session(&mut s, DEFAULT_REFINEMENT_TEXT, &mut sink).unwrap();
        run.refine_secs += t1.elapsed().as_secs_f64();
        run.ci2.push(s.round(2).unwrap().selected().unwrap().metrics.as_ref().unwrap().ci);
    }
    run
}

fn cohort_planning(run: &CohortRun) -> Outcome {
    ensure(run.passed >= 16, format!("{}/20 cases met all goals", run.passed))?;
    ensure(run.plan_secs < 600.0, format!("runtime {:.1} s", run.plan_secs))?;
    Ok(format!("{}/20 cases met all goals in {:.1} s", run.passed, run.plan_secs))
}

fn refinement_effect(run: &CohortRun) -> Outcome {
    let pairs: Vec<(f64, f64)> = run.ci2.iter().copied().zip(run.ci1.iter().copied()).collect();
    let improved = pairs.iter().filter(|(b, a)| b > a).count();
    let t = wilcoxon_signed_rank(&PairedSample::new("ci", pairs.clone()).unwrap()).map_err(|e| e.to_string())?;
    let d: Vec<f64> = pairs.iter().map(|(b, a)| b - a).collect();
    let med = srsplan_core::stats::median(&d);
    ensure(med > 0.0, format!("median CI change {med}"))?;
    ensure(t.p_value < 0.05, format!("p = {}", t.p_value))?;
    Ok(format!(
        "CI improved in {improved}/20, median change {med:+.3}, p = {:.2e} ({:?}), refinement {:.1} s",
        t.p_value, t.method, run.refine_secs
    ))
}

fn trace_fidelity() -> Outcome {
    let corpus = labeled_corpus();
    ensure(corpus.len() == 60, format!("corpus has {} sentences", corpus.len()))?;
    let mut per_cat: BTreeMap<CognitiveCategory, usize> = BTreeMap::new();
    for (_, labels) in &corpus {
        for l in labels {
            *per_cat.entry(*l).or_default() += 1;
        }
    }
    ensure(per_cat.values().all(|&n| n >= 10), "fewer than 10 sentences for a category")?;
    let lex = MarkerLexicon::default();
    for (c, p, r) in precision_recall(&corpus, &lex) {
        ensure(p == 1.0 && r == 1.0, format!("{c}: precision {p}, recall {r}"))?;
    }
    let log = |errors: &[usize]| {
        let mut recs = Vec::new();
        for (i, &e) in errors.iter().enumerate() {
            let case = format!("p{i}");
            recs.push(trace_record("s", &case, 1, "I will start by setting the target.", false));
            for k in 0..e {
                recs.push(trace_record("s", &case, 2 + k, "", true));
            }
        }
        analyze_session(&recs, &lex)
    };
    let cmp = compare_variants(&log(&[0, 0, 1]), &log(&[3, 3, 4])).map_err(|e| e.to_string())?;
    ensure(cmp.median_format_errors_a == 0.0 && cmp.median_format_errors_b == 3.0, "format-error medians")?;
    Ok(format!(
        "precision = recall = 1 in all 6 categories; format-error medians {} vs {}",
        cmp.median_format_errors_a, cmp.median_format_errors_b
    ))
}

fn stats_pipeline() -> Outcome {
    let res = endpoint_family_analysis(
        &fixture("metrics_agent.csv"),
        &fixture("metrics_human.csv"),
        &EndpointFamilies::default(),
        DEFAULT_BOOTSTRAP,
        42,
    )
    .map_err(|e| e.to_string())?;
    let primary = res.family(Family::Primary).significant();
    let secondary = res.family(Family::Secondary).significant();
    ensure(primary.is_empty(), format!("primary flagged {primary:?}"))?;
    ensure(secondary == vec!["cochlea_r_dmax_gy"], format!("secondary flagged {secondary:?}"))?;
    let q = res.endpoint("cochlea_r_dmax_gy").unwrap().q_value;
    Ok(format!("only cochlea_r_dmax_gy flagged (q = {q:.2e})"))
}

fn review_state_machine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut transitions = 0usize;
    for _ in 0..5000 {
        let mut status = SessionStatus::AwaitingReview;
        let mut rounds = 1usize;
        let mut decided = false;
        for _ in 0..rng.random_range(1..10) {
            let (verdict, text) = match rng.random_range(0..3) {
                0 => (Verdict::Accept, None),
                1 => (Verdict::Refine, Some("refine")),
                _ => (Verdict::Refine, None),
            };
            match decide(status, rounds, verdict, text, 1) {
                Ok(next) => {
                    ensure(!decided, "second decision accepted in one round")?;
                    ensure(is_legal_transition(status, next), format!("{status:?} -> {next:?}"))?;
                    transitions += 1;
                    decided = true;
                    status = next;
                    if status == SessionStatus::Refined {
                        rounds += 1;
                        status = SessionStatus::AwaitingReview;
                        decided = false;
                    }
                }
                Err(ReviewError::Conflict(_) | ReviewError::InvalidArgument(_)) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    for first in [Verdict::Accept, Verdict::Refine] {
        let after = decide(SessionStatus::AwaitingReview, 1, first, Some("t"), 1).unwrap();
        for second in [Verdict::Accept, Verdict::Refine] {
            ensure(
                matches!(decide(after, 1, second, Some("t"), 1), Err(ReviewError::Conflict(_))),
                "double decision accepted",
            )?;
        }
    }

    // the same sequences against a stored session through the service
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (case, _) = fixture_case("acc-review");
    let policy: Arc<dyn PolicyAdapter> = Arc::new(ReplayPolicy::from_texts("fixed", [answer(&good_plan(&case))]));
    let registry: PolicyRegistry = [("fixed".to_string(), policy)].into_iter().collect();
    let svc = ReviewService::new(
        ReviewStore::open(dir.path()).map_err(|e| e.to_string())?,
        GoalSet::default(),
        registry,
        LoopConfig { backoff_ms: 0, ..Default::default() },
        Arc::new(FixedClock(0)),
    );
    let id = svc.plan_case(&case, "fixed").map_err(|e| e.to_string())?.session_id;
    let pristine = svc.store().load(&id).map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    for _ in 0..8 {
        svc.store().save(&pristine).map_err(|e| e.to_string())?;
        let mut status = pristine.session.status;
        for _ in 0..rng.random_range(1..5) {
            let req = match rng.random_range(0..3) {
                0 => DecisionRequest::accept(),
                1 => DecisionRequest::refine(DEFAULT_REFINEMENT_TEXT),
                _ => DecisionRequest::refine(""),
            };
            if let Ok(s) = svc.submit_decision(&id, &req) {
                ensure(is_legal_transition(status, s.status), format!("{status:?} -> {:?}", s.status))?;
                status = s.status;
                seen.insert(format!("{status:?}"));
                if status == SessionStatus::Refined {
                    let s = svc.run_refinement(&id).map_err(|e| e.to_string())?;
                    ensure(is_legal_transition(status, s.status), "refinement transition")?;
                    status = s.status;
                }
            }
        }
    }
    Ok(format!("{transitions} model transitions legal; double decisions conflict; service reached {seen:?}"))
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match out {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };
    report("metric-oracle-equivalence", &metric_oracle);
    report("analytic-ci", &analytic_ci);
    report("exact-wilcoxon", &exact_wilcoxon);
    report("bh-correctness", &bh);
    report("loop-semantics", &loop_semantics);
    let cohort = catch_unwind(run_cohort).ok();
    let missing = || Err::<String, String>("cohort run panicked".into());
    match &cohort {
        Some(run) => {
            report("synthetic-cohort-planning", &|| cohort_planning(run));
            report("refinement-effect", &|| refinement_effect(run));
        }
        None => {
            report("synthetic-cohort-planning", &missing);
            report("refinement-effect", &missing);
        }
    }
    report("trace-analyzer-fidelity", &trace_fidelity);
    report("statistics-pipeline", &stats_pipeline);
    report("review-state-machine", &review_state_machine);
    println!("acceptance: {} criteria failed, {:.1} s", failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
