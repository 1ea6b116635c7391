//! `srsplan` command-line tool.

use std::fs::{self, File};
use std::io::BufWriter;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use srsplan_core::agent::remote::{RemotePolicy, RemotePolicyConfig};
use srsplan_core::agent::{
    LoopConfig, PolicyAdapter, PolicyConfig, ScriptedPolicy, SessionStatus, SystemClock, DEFAULT_REFINEMENT_TEXT,
    MAX_ITERATIONS,
};
use srsplan_core::case::{generate_cohort, Case, CohortSpec};
use srsplan_core::evaluator::{metric_rows, write_metrics_csv, GoalSet, MetricRow};
use srsplan_core::review::{DecisionRequest, PolicyRegistry, ReviewService, ReviewStore};
use srsplan_core::stats::{
    emit_plot_data, endpoint_family_analysis, write_plot_csv, write_results_csv, EndpointFamilies, DEFAULT_BOOTSTRAP,
};
use srsplan_core::traces::{
    analyze_log_file, compare_variants, sample_for_review, write_comparison_csv, write_counts_csv, write_review_csv,
    MarkerLexicon, TraceAnalysis,
};

#[derive(Parser)]
#[command(name = "srsplan", version, about = "Synthetic SRS planning agent, trace analysis and statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    /// Deterministic heuristic planner with reasoning-style rationale.
    Scripted,
    /// Heuristic planner with terse rationale and injected format errors.
    ScriptedTerse,
    /// Chat-completion endpoint configured through environment variables.
    Remote,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoundChoice {
    First,
    Last,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of case files.
    GenerateCases {
        /// Cohort spec JSON; the built-in cohort when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the planning loop on a case file or every case in a directory.
    Plan {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyKind::Scripted)]
        policy: PolicyKind,
        /// Session store directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        goals: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = MAX_ITERATIONS)]
        max_iterations: usize,
        /// Format-error rate of the terse scripted policy.
        #[arg(long, default_value_t = 0.2)]
        format_error_rate: f64,
    },
    /// Refine a stored session awaiting review and run its next round.
    Refine {
        /// Session JSON file inside a store's `sessions/` directory.
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value = DEFAULT_REFINEMENT_TEXT)]
        text: String,
        #[arg(long)]
        reviewer: Option<String>,
        #[arg(long)]
        goals: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        format_error_rate: f64,
    },
    /// Accept a stored session awaiting review.
    Accept {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        reviewer: Option<String>,
    },
    /// Write the selected plan metrics of every stored session as CSV.
    ExportMetrics {
        #[arg(long)]
        store: PathBuf,
        /// Variant label written into every row.
        #[arg(long)]
        variant: String,
        #[arg(long, value_enum, default_value_t = RoundChoice::Last)]
        round: RoundChoice,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify rationale text in trace logs and export the review sample.
    AnalyzeTraces {
        /// Directory of JSONL trace logs.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        sample_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Second log directory to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Paired endpoint comparison of two metrics tables.
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        families: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
        n_boot: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API over a session store.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        goals: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        format_error_rate: f64,
    },
}

fn load_goals(path: Option<&Path>) -> Result<GoalSet> {
    match path {
        Some(p) => GoalSet::load(p).with_context(|| format!("loading goals {}", p.display())),
        None => Ok(GoalSet::default()),
    }
}

fn make_policy(kind: PolicyKind, format_error_rate: f64) -> Result<Arc<dyn PolicyAdapter>> {
    Ok(match kind {
        PolicyKind::Scripted => Arc::new(ScriptedPolicy::new(PolicyConfig::default())),
        PolicyKind::ScriptedTerse => Arc::new(ScriptedPolicy::terse(PolicyConfig::default(), format_error_rate)),
        PolicyKind::Remote => Arc::new(RemotePolicy::new(RemotePolicyConfig::from_env(PolicyConfig::default())?)),
    })
}

/// Every policy that can be constructed in this environment, keyed by name.
fn registry(format_error_rate: f64) -> Result<PolicyRegistry> {
    let mut reg = PolicyRegistry::new();
    for kind in [PolicyKind::Scripted, PolicyKind::ScriptedTerse, PolicyKind::Remote] {
        match make_policy(kind, format_error_rate) {
            Ok(p) => {
                reg.insert(p.name().to_string(), p);
            }
            Err(e) if kind == PolicyKind::Remote => tracing::debug!(error = %e, "remote policy unavailable"),
            Err(e) => return Err(e),
        }
    }
    Ok(reg)
}

fn service(store: &Path, goals: GoalSet, policies: PolicyRegistry, config: LoopConfig) -> Result<ReviewService> {
    let store = ReviewStore::open(store).with_context(|| format!("opening store {}", store.display()))?;
    Ok(ReviewService::new(store, goals, policies, config, Arc::new(SystemClock)))
}

fn case_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no case files in {}", path.display());
    }
    Ok(files)
}

/// Store root and session id of a session file `<root>/sessions/<id>.json`.
fn session_location(file: &Path) -> Result<(PathBuf, String)> {
    let id = file.file_stem().and_then(|s| s.to_str()).context("session file has no name")?.to_string();
    let root = file
        .parent()
        .and_then(Path::parent)
        .context("session file must live in a store's sessions/ directory")?
        .to_path_buf();
    Ok((root, id))
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn analyze_dir(dir: &Path, lexicon: &MarkerLexicon) -> Result<Vec<TraceAnalysis>> {
    log_files(dir)?
        .iter()
        .map(|f| analyze_log_file(f, lexicon).with_context(|| format!("analyzing {}", f.display())))
        .collect()
}

fn merged(analyses: &[TraceAnalysis]) -> Option<TraceAnalysis> {
    analyses.iter().cloned().reduce(TraceAnalysis::merge)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCases { spec, out, count, seed } => {
            let cohort = match spec {
                Some(p) => serde_json::from_str::<CohortSpec>(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => CohortSpec::default(),
            };
            fs::create_dir_all(&out)?;
            for case in generate_cohort(&cohort, count, seed)? {
                let path = out.join(format!("{}.json", case.id()));
                case.save_json(&path)?;
                println!("{}", path.display());
            }
        }
        Command::Plan { case, policy, out, goals, seed, max_iterations, format_error_rate } => {
            let p = make_policy(policy, format_error_rate)?;
            let name = p.name().to_string();
            let config = LoopConfig { seed, max_iterations, ..Default::default() };
            let svc = service(&out, load_goals(goals.as_deref())?, [(name.clone(), p)].into_iter().collect(), config)?;
            for file in case_files(&case)? {
                let c = Case::load_json(&file).with_context(|| format!("loading {}", file.display()))?;
                let s = svc.plan_case(&c, &name)?;
                let passed = s.goals_passed.map_or("-".to_string(), |b| b.to_string());
                let ci = s.metrics.as_ref().map_or("-".to_string(), |m| format!("{:.3}", m.ci));
                println!(
                    "{} {} {:?} iteration={:?} passed={} ci={}",
                    s.session_id, s.case_id, s.status, s.selected_iteration, passed, ci
                );
            }
        }
        Command::Refine { session, text, reviewer, goals, format_error_rate } => {
            let (root, id) = session_location(&session)?;
            let seed = ReviewStore::open(&root)?.load(&id)?.session.seed;
            let config = LoopConfig { seed, ..Default::default() };
            let svc = service(&root, load_goals(goals.as_deref())?, registry(format_error_rate)?, config)?;
            let mut req = DecisionRequest::refine(text);
            req.reviewer_id = reviewer;
            svc.submit_decision(&id, &req)?;
            let s = svc.run_refinement(&id)?;
            let ci = s.metrics.as_ref().map_or("-".to_string(), |m| format!("{:.3}", m.ci));
            println!("{} {:?} round={} ci={}", s.session_id, s.status, s.round, ci);
        }
        Command::Accept { session, reviewer } => {
            let (root, id) = session_location(&session)?;
            let svc = service(&root, GoalSet::default(), PolicyRegistry::new(), LoopConfig::default())?;
            let mut req = DecisionRequest::accept();
            req.reviewer_id = reviewer;
            let s = svc.submit_decision(&id, &req)?;
            println!("{} {:?}", s.session_id, s.status);
        }
        Command::ExportMetrics { store, variant, round, out } => {
            let store = ReviewStore::open(&store)?;
            let mut rows: Vec<MetricRow> = Vec::new();
            for record in store.list()? {
                let s = &record.session;
                if s.status == SessionStatus::Failed {
                    tracing::warn!(session = %s.session_id, "skipping failed session");
                    continue;
                }
                let r = match round {
                    RoundChoice::First => s.round(1),
                    RoundChoice::Last => s.rounds.iter().rev().find(|r| r.selected_iteration.is_some()),
                };
                let Some(m) = r.and_then(|r| r.selected()).and_then(|i| i.metrics.as_ref()) else { continue };
                rows.extend(metric_rows(&s.case_id, &variant, m));
            }
            rows.sort_by(|a, b| (&a.patient, &a.metric).cmp(&(&b.patient, &b.metric)));
            write_metrics_csv(create(&out)?, &rows)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::AnalyzeTraces { logs, lexicon, sample_fraction, seed, out, compare } => {
            let lex = match lexicon {
                Some(p) => MarkerLexicon::load(&p)?,
                None => MarkerLexicon::default(),
            };
            fs::create_dir_all(&out)?;
            let analyses = analyze_dir(&logs, &lex)?;
            let Some(total) = merged(&analyses) else { bail!("no trace logs in {}", logs.display()) };
            write_counts_csv(&total, create(&out.join("counts.csv"))?)?;
            serde_json::to_writer_pretty(create(&out.join("analysis.json"))?, &total)?;
            let sample = sample_for_review(&analyses, sample_fraction, seed)?;
            write_review_csv(&sample, create(&out.join("review_sample.csv"))?)?;
            fs::write(out.join("lexicon.json"), lex.to_json())?;
            println!(
                "{} sessions, {} utterances, {} category instances, {} format errors, {} sampled",
                total.sessions.len(),
                total.utterances.len(),
                total.total_instances(),
                total.format_errors,
                sample.len()
            );
            if let Some(dir) = compare {
                let Some(other) = merged(&analyze_dir(&dir, &lex)?) else {
                    bail!("no trace logs in {}", dir.display())
                };
                let cmp = compare_variants(&total, &other)?;
                write_comparison_csv(&cmp, create(&out.join("comparison.csv"))?)?;
                println!(
                    "median format errors per case: {} vs {}",
                    cmp.median_format_errors_a, cmp.median_format_errors_b
                );
            }
        }
        Command::Stats { a, b, families, seed, n_boot, out } => {
            let read = |p: &Path| -> Result<Vec<MetricRow>> {
                srsplan_core::evaluator::read_metrics_csv(
                    File::open(p).with_context(|| format!("opening {}", p.display()))?,
                )
                .with_context(|| format!("parsing {}", p.display()))
            };
            let (rows_a, rows_b) = (read(&a)?, read(&b)?);
            let fams = match families {
                Some(p) => EndpointFamilies::load(&p)?,
                None => EndpointFamilies::default(),
            };
            fs::create_dir_all(&out)?;
            let res = endpoint_family_analysis(&rows_a, &rows_b, &fams, n_boot, seed)?;
            write_results_csv(&res, create(&out.join("results.csv"))?)?;
            serde_json::to_writer_pretty(create(&out.join("results.json"))?, &res)?;
            let label =
                |rows: &[MetricRow], fallback: &str| rows.first().map_or(fallback.to_string(), |r| r.variant.clone());
            let (la, lb) = (label(&rows_a, "a"), label(&rows_b, "b"));
            for endpoint in fams.primary.iter().chain(&fams.secondary) {
                let plot = emit_plot_data(&[(la.as_str(), &rows_a), (lb.as_str(), &rows_b)], endpoint)?;
                write_plot_csv(&plot, create(&out.join(format!("plot_{endpoint}.csv")))?)?;
            }
            for row in res.rows() {
                println!(
                    "{:<20} p={:.4} q={:.4}{}",
                    row.endpoint,
                    row.p_value,
                    row.q_value,
                    if row.significant { " *" } else { "" }
                );
            }
        }
        Command::Serve { store, port, host, goals, seed, format_error_rate } => {
            let config = LoopConfig { seed, ..Default::default() };
            let svc = Arc::new(service(&store, load_goals(goals.as_deref())?, registry(format_error_rate)?, config)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(srsplan_server::serve(svc, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
