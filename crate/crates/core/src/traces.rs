//! Content analysis of policy rationales.
//!
//! Rationale text is split into sentence utterances and each utterance is
//! tagged with every cognitive category whose lexicon has a matching marker.
//! Markers are case-insensitive word sequences matched on word boundaries.
//! Two template forms are supported: `...` stands for a gap of at most
//! [`MAX_GAP_WORDS`] words, and a lone `X`, `Y` or `Z` stands for exactly one
//! word.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::trace::TraceRecord;

/// Largest number of words a `...` gap may span.
pub const MAX_GAP_WORDS: usize = 12;

const DEFAULT_LEXICON: &str = include_str!("../config/lexicon.json");

/// Words whose trailing period does not end a sentence.
const ABBREVIATIONS: &[&str] = &["e.g", "i.e", "vs", "etc", "approx", "cf", "fig", "dr", "no", "eq", "max", "min"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CognitiveCategory {
    ProblemDecomposition,
    ProspectiveVerification,
    SelfCorrection,
    MathematicalReasoning,
    TradeOffDeliberation,
    ForwardSimulation,
}

impl CognitiveCategory {
    pub const ALL: [CognitiveCategory; 6] = [
        CognitiveCategory::ProblemDecomposition,
        CognitiveCategory::ProspectiveVerification,
        CognitiveCategory::SelfCorrection,
        CognitiveCategory::MathematicalReasoning,
        CognitiveCategory::TradeOffDeliberation,
        CognitiveCategory::ForwardSimulation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CognitiveCategory::ProblemDecomposition => "ProblemDecomposition",
            CognitiveCategory::ProspectiveVerification => "ProspectiveVerification",
            CognitiveCategory::SelfCorrection => "SelfCorrection",
            CognitiveCategory::MathematicalReasoning => "MathematicalReasoning",
            CognitiveCategory::TradeOffDeliberation => "TradeOffDeliberation",
            CognitiveCategory::ForwardSimulation => "ForwardSimulation",
        }
    }
}

impl fmt::Display for CognitiveCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CognitiveCategory {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TraceError::InvalidArgument(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Word(String),
    Any,
    Gap,
}

/// A compiled marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    tokens: Vec<Token>,
}

impl Pattern {
    pub fn parse(source: &str) -> Result<Self, TraceError> {
        let spaced = source.replace('…', "...").replace("...", " ... ");
        let mut tokens = Vec::new();
        for piece in spaced.split_whitespace() {
            if piece == "..." {
                tokens.push(Token::Gap);
            } else if matches!(piece, "X" | "Y" | "Z") {
                tokens.push(Token::Any);
            } else {
                tokens.extend(words(piece).into_iter().map(Token::Word));
            }
        }
        if !tokens.iter().any(|t| matches!(t, Token::Word(_))) {
            return Err(TraceError::InvalidLexicon(format!("pattern {source:?} has no literal word")));
        }
        if matches!(tokens.first(), Some(Token::Gap)) || matches!(tokens.last(), Some(Token::Gap)) {
            return Err(TraceError::InvalidLexicon(format!("pattern {source:?} starts or ends with a gap")));
        }
        Ok(Self { source: source.to_string(), tokens })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Whether the pattern occurs in a lowercase word sequence.
    pub fn matches_words(&self, text: &[String]) -> bool {
        (0..text.len()).any(|start| match_at(&self.tokens, text, start))
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matches_words(&words(text))
    }
}

fn match_at(pattern: &[Token], text: &[String], pos: usize) -> bool {
    let Some((head, rest)) = pattern.split_first() else { return true };
    match head {
        Token::Word(w) => text.get(pos).is_some_and(|t| t == w) && match_at(rest, text, pos + 1),
        Token::Any => pos < text.len() && match_at(rest, text, pos + 1),
        Token::Gap => (0..=MAX_GAP_WORDS).any(|skip| pos + skip <= text.len() && match_at(rest, text, pos + skip)),
    }
}

/// Lowercase words of `text`. A word is a run of alphanumerics, which may
/// contain single `.`, `'` or `-` characters between alphanumerics.
pub fn words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if matches!(c, '.' | '\'' | '-' | '’')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Category to marker patterns; serialized as a JSON object of string lists.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerLexicon {
    sources: BTreeMap<CognitiveCategory, Vec<String>>,
    compiled: BTreeMap<CognitiveCategory, Vec<Pattern>>,
}

impl MarkerLexicon {
    pub fn new(sources: BTreeMap<CognitiveCategory, Vec<String>>) -> Result<Self, TraceError> {
        let mut compiled = BTreeMap::new();
        for c in CognitiveCategory::ALL {
            let list = sources
                .get(&c)
                .filter(|l| !l.is_empty())
                .ok_or_else(|| TraceError::InvalidLexicon(format!("category {c} has no patterns")))?;
            let pats = list
                .iter()
                .map(|p| {
                    if p.trim().is_empty() {
                        Err(TraceError::InvalidLexicon(format!("category {c} has an empty pattern")))
                    } else {
                        Pattern::parse(p)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            compiled.insert(c, pats);
        }
        Ok(Self { sources, compiled })
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let sources: BTreeMap<CognitiveCategory, Vec<String>> =
            serde_json::from_str(text).map_err(|e| TraceError::InvalidLexicon(e.to_string()))?;
        Self::new(sources)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.sources).expect("serializable")
    }

    pub fn patterns(&self, category: CognitiveCategory) -> &[Pattern] {
        &self.compiled[&category]
    }

    /// Adds patterns to a category.
    pub fn extend(&mut self, category: CognitiveCategory, patterns: &[&str]) -> Result<(), TraceError> {
        let mut sources = self.sources.clone();
        sources.entry(category).or_default().extend(patterns.iter().map(|p| p.to_string()));
        *self = Self::new(sources)?;
        Ok(())
    }
}

impl Default for MarkerLexicon {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

pub fn classify_utterance(text: &str, lexicon: &MarkerLexicon) -> BTreeSet<CognitiveCategory> {
    let w = words(text);
    CognitiveCategory::ALL.into_iter().filter(|&c| lexicon.patterns(c).iter().any(|p| p.matches_words(&w))).collect()
}

/// Splits text into sentences at `.`, `!`, `?` followed by whitespace or end
/// of text, and at line breaks. Ellipses, decimals and common abbreviations
/// do not end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut flush = |cur: &mut String| {
        let s = cur.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        cur.clear();
    };
    for (i, &c) in chars.iter().enumerate() {
        if c == '\n' {
            flush(&mut cur);
            continue;
        }
        cur.push(c);
        let terminal = matches!(c, '.' | '!' | '?');
        let at_break = chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if !terminal || !at_break {
            continue;
        }
        if c == '.' {
            let prev_dot = i > 0 && chars[i - 1] == '.';
            let last_word: String = cur[..cur.len() - 1]
                .rsplit(|ch: char| ch.is_whitespace() || ch == '(')
                .next()
                .unwrap_or("")
                .to_lowercase();
            if prev_dot || ABBREVIATIONS.contains(&last_word.as_str()) {
                continue;
            }
        }
        flush(&mut cur);
    }
    flush(&mut cur);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// `session/r<round>/i<iteration>/a<attempt>/s<sentence>`
    pub id: String,
    pub session_id: String,
    pub case_id: String,
    pub text: String,
    pub categories: BTreeSet<CognitiveCategory>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub counts: BTreeMap<CognitiveCategory, usize>,
    pub format_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAnalysis {
    pub sessions: Vec<String>,
    pub counts: BTreeMap<CognitiveCategory, usize>,
    pub format_errors: usize,
    pub per_case: BTreeMap<String, CaseCounts>,
    pub utterances: Vec<Utterance>,
}

fn zero_counts() -> BTreeMap<CognitiveCategory, usize> {
    CognitiveCategory::ALL.into_iter().map(|c| (c, 0)).collect()
}

impl Default for TraceAnalysis {
    fn default() -> Self {
        Self {
            sessions: Vec::new(),
            counts: zero_counts(),
            format_errors: 0,
            per_case: BTreeMap::new(),
            utterances: Vec::new(),
        }
    }
}

impl TraceAnalysis {
    pub fn total_instances(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, category: CognitiveCategory) -> usize {
        self.counts.get(&category).copied().unwrap_or(0)
    }

    pub fn case_ids(&self) -> BTreeSet<&str> {
        self.per_case.keys().map(String::as_str).collect()
    }

    /// Combines two analyses as if their logs had been concatenated.
    pub fn merge(mut self, other: TraceAnalysis) -> TraceAnalysis {
        for s in other.sessions {
            if !self.sessions.contains(&s) {
                self.sessions.push(s);
            }
        }
        for (c, n) in other.counts {
            *self.counts.entry(c).or_insert(0) += n;
        }
        self.format_errors += other.format_errors;
        for (case, cc) in other.per_case {
            let e = self.per_case.entry(case).or_insert_with(|| CaseCounts { counts: zero_counts(), format_errors: 0 });
            for (c, n) in cc.counts {
                *e.counts.entry(c).or_insert(0) += n;
            }
            e.format_errors += cc.format_errors;
        }
        self.utterances.extend(other.utterances);
        self
    }
}

/// Classifies every rationale sentence in a trace log. Each invocation that
/// failed to parse counts as one format error.
pub fn analyze_session(records: &[TraceRecord], lexicon: &MarkerLexicon) -> TraceAnalysis {
    let mut a = TraceAnalysis::default();
    for r in records {
        if !a.sessions.contains(&r.session_id) {
            a.sessions.push(r.session_id.clone());
        }
        let case = a
            .per_case
            .entry(r.case_id.clone())
            .or_insert_with(|| CaseCounts { counts: zero_counts(), format_errors: 0 });
        if r.format_error {
            a.format_errors += 1;
            case.format_errors += 1;
        }
        for (k, sentence) in split_sentences(&r.rationale).into_iter().enumerate() {
            let categories = classify_utterance(&sentence, lexicon);
            for &c in &categories {
                *a.counts.get_mut(&c).expect("all categories present") += 1;
                *case.counts.get_mut(&c).expect("all categories present") += 1;
            }
            a.utterances.push(Utterance {
                id: format!("{}/r{}/i{}/a{}/s{}", r.session_id, r.round, r.index, r.attempt, k + 1),
                session_id: r.session_id.clone(),
                case_id: r.case_id.clone(),
                text: sentence,
                categories,
            });
        }
    }
    a
}

pub fn analyze_log_file(path: &Path, lexicon: &MarkerLexicon) -> Result<TraceAnalysis, TraceError> {
    let records = crate::agent::trace::read_jsonl(path).map_err(|e| TraceError::Io(e.to_string()))?;
    Ok(analyze_session(&records, lexicon))
}

/// One row of the manual verification sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSampleRow {
    pub utterance_id: String,
    pub case_id: String,
    pub text: String,
    /// Assigned categories joined with `;`.
    pub categories: String,
    /// Filled in by the reviewer: `agree` or `disagree`.
    pub verdict: String,
    pub note: String,
}

/// Uniform sample without replacement of `ceil(fraction * N)` utterances,
/// returned in log order.
pub fn sample_for_review(
    analyses: &[TraceAnalysis],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ReviewSampleRow>, TraceError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TraceError::InvalidArgument(format!("fraction must be in [0, 1], got {fraction}")));
    }
    let all: Vec<&Utterance> = analyses.iter().flat_map(|a| a.utterances.iter()).collect();
    let k = ((fraction * all.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, all.len(), k.min(all.len())).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let u = all[i];
            ReviewSampleRow {
                utterance_id: u.id.clone(),
                case_id: u.case_id.clone(),
                text: u.text.clone(),
                categories: u.categories.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(";"),
                verdict: String::new(),
                note: String::new(),
            }
        })
        .collect())
}

pub fn write_review_csv<W: Write>(rows: &[ReviewSampleRow], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["utterance_id", "case_id", "text", "categories", "verdict", "note"])
            .map_err(|e| TraceError::Io(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| TraceError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TraceError::Io(e.to_string()))
}

pub fn read_review_csv<R: Read>(input: R) -> Result<Vec<ReviewSampleRow>, TraceError> {
    csv::Reader::from_reader(input).deserialize().collect::<Result<_, _>>().map_err(|e| TraceError::Io(e.to_string()))
}

/// Share of reviewed rows marked `agree`; `None` until a verdict exists.
pub fn review_concordance(rows: &[ReviewSampleRow]) -> Option<f64> {
    let judged: Vec<_> = rows.iter().filter(|r| !r.verdict.trim().is_empty()).collect();
    if judged.is_empty() {
        return None;
    }
    let agree = judged.iter().filter(|r| r.verdict.trim().eq_ignore_ascii_case("agree")).count();
    Some(agree as f64 / judged.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryComparison {
    pub category: CognitiveCategory,
    pub count_a: usize,
    pub count_b: usize,
    /// `a / (a + b)`; undefined when both are zero.
    pub share_a: Option<f64>,
    /// Set when only one variant shows the category.
    pub exclusive_to: Option<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub categories: Vec<CategoryComparison>,
    pub format_errors_a: usize,
    pub format_errors_b: usize,
    pub median_format_errors_a: f64,
    pub median_format_errors_b: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn compare_variants(a: &TraceAnalysis, b: &TraceAnalysis) -> Result<VariantComparison, TraceError> {
    if a.case_ids() != b.case_ids() {
        return Err(TraceError::InvalidArgument("variants cover different case sets".into()));
    }
    if a.per_case.is_empty() {
        return Err(TraceError::InvalidArgument("analyses contain no cases".into()));
    }
    let categories = CognitiveCategory::ALL
        .into_iter()
        .map(|c| {
            let (na, nb) = (a.count(c), b.count(c));
            CategoryComparison {
                category: c,
                count_a: na,
                count_b: nb,
                share_a: (na + nb > 0).then(|| na as f64 / (na + nb) as f64),
                exclusive_to: match (na, nb) {
                    (0, 0) => None,
                    (_, 0) => Some(Variant::A),
                    (0, _) => Some(Variant::B),
                    _ => None,
                },
            }
        })
        .collect();
    let per_case = |x: &TraceAnalysis| x.per_case.values().map(|c| c.format_errors as f64).collect::<Vec<_>>();
    Ok(VariantComparison {
        categories,
        format_errors_a: a.format_errors,
        format_errors_b: b.format_errors,
        median_format_errors_a: median(&per_case(a)).expect("non-empty"),
        median_format_errors_b: median(&per_case(b)).expect("non-empty"),
    })
}

pub fn write_comparison_csv<W: Write>(cmp: &VariantComparison, out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TraceError::Io(e.to_string());
    w.write_record(["category", "count_a", "count_b", "share_a", "exclusive_to"]).map_err(io)?;
    for c in &cmp.categories {
        w.write_record([
            c.category.as_str().to_string(),
            c.count_a.to_string(),
            c.count_b.to_string(),
            c.share_a.map(|s| format!("{s:.4}")).unwrap_or_default(),
            c.exclusive_to.map(|v| format!("{v:?}").to_lowercase()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.write_record(["format_errors", &cmp.format_errors_a.to_string(), &cmp.format_errors_b.to_string(), "", ""])
        .map_err(io)?;
    w.write_record([
        "median_format_errors_per_case",
        &cmp.median_format_errors_a.to_string(),
        &cmp.median_format_errors_b.to_string(),
        "",
        "",
    ])
    .map_err(io)?;
    w.flush().map_err(|e| TraceError::Io(e.to_string()))
}

/// Per-category counts as CSV, one row per category plus format errors.
pub fn write_counts_csv<W: Write>(analysis: &TraceAnalysis, out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| TraceError::Io(e.to_string());
    w.write_record(["case_id", "category", "count"]).map_err(io)?;
    for (case, cc) in &analysis.per_case {
        for (c, n) in &cc.counts {
            w.write_record([case.as_str(), c.as_str(), &n.to_string()]).map_err(io)?;
        }
        w.write_record([case.as_str(), "FormatError", &cc.format_errors.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| TraceError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use CognitiveCategory::*;

    fn set(c: &[CognitiveCategory]) -> BTreeSet<CognitiveCategory> {
        c.iter().copied().collect()
    }

    #[test]
    fn classifies_examples() {
        let lex = MarkerLexicon::default();
        assert_eq!(
            classify_utterance("First, I will check whether V12Gy would exceed 10 cc.", &lex),
            set(&[ProblemDecomposition, ProspectiveVerification])
        );
        assert!(classify_utterance("", &lex).is_empty());
        assert_eq!(
            classify_utterance("We must balance coverage versus brainstem dose, at the cost of conformity.", &lex),
            set(&[TradeOffDeliberation])
        );
    }

    #[test]
    fn markers_need_word_boundaries() {
        let lex = MarkerLexicon::default();
        assert!(classify_utterance("The firstborn plan is unbalanced.", &lex).is_empty());
        assert!(classify_utterance("Nothing was expected.", &lex).is_empty());
        assert_eq!(classify_utterance("BALANCE matters", &lex), set(&[TradeOffDeliberation]));
    }

    #[test]
    fn gap_template_is_bounded() {
        let p = Pattern::parse("If... then").unwrap();
        assert!(p.matches("If coverage drops then raise it"));
        assert!(p.matches("if then"));
        let twelve = ["w"; 12].join(" ");
        let thirteen = vec!["w"; 13].join(" ");
        assert!(p.matches(&format!("if {twelve} then")));
        assert!(!p.matches(&format!("if {thirteen} then")));
    }

    #[test]
    fn placeholder_matches_one_word() {
        let p = Pattern::parse("increase from X to Y").unwrap();
        assert!(p.matches("an increase from 18.00 to 18.35 Gy"));
        assert!(!p.matches("an increase from to 18.35"));
        assert!(!p.matches("an increase from 18 Gy to 19 Gy"));
    }

    #[test]
    fn pronoun_i_is_literal() {
        let p = Pattern::parse("I will revise").unwrap();
        assert!(p.matches("so I will revise the cap"));
        assert!(!p.matches("so we will revise the cap"));
    }

    #[test]
    fn sentence_splitting() {
        let s = split_sentences("Dose is 18.5 Gy. Check e.g. the cochlea! Why?\nNext line... still going. End");
        assert_eq!(s, vec!["Dose is 18.5 Gy.", "Check e.g. the cochlea!", "Why?", "Next line... still going.", "End"]);
        assert!(split_sentences("  \n ").is_empty());
    }

    #[test]
    fn lexicon_round_trips_and_contains_table_markers() {
        let lex = MarkerLexicon::default();
        assert_eq!(MarkerLexicon::from_json(&lex.to_json()).unwrap(), lex);
        let sources: Vec<&str> = lex.patterns(SelfCorrection).iter().map(Pattern::source).collect();
        assert_eq!(
            sources,
            ["reverting", "instead", "previous attempt", "I will revise", "This assumption was incorrect"]
        );
        assert_eq!(lex.patterns(ForwardSimulation).len(), 3);
    }

    #[test]
    fn lexicon_rejects_missing_or_empty() {
        let mut m: BTreeMap<CognitiveCategory, Vec<String>> =
            CognitiveCategory::ALL.into_iter().map(|c| (c, vec!["word".to_string()])).collect();
        assert!(MarkerLexicon::new(m.clone()).is_ok());
        m.insert(TradeOffDeliberation, vec![]);
        assert!(MarkerLexicon::new(m.clone()).is_err());
        m.insert(TradeOffDeliberation, vec![" ".into()]);
        assert!(MarkerLexicon::new(m).is_err());
    }

    #[test]
    fn lexicon_is_extensible() {
        let mut lex = MarkerLexicon::default();
        assert!(classify_utterance("We weigh the options.", &lex).is_empty());
        lex.extend(TradeOffDeliberation, &["weigh"]).unwrap();
        assert_eq!(classify_utterance("We weigh the options.", &lex), set(&[TradeOffDeliberation]));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.0, 0.0, 1.0]), Some(0.0));
        assert_eq!(median(&[3.0, 3.0, 4.0]), Some(3.0));
        assert_eq!(median(&[1.0, 2.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }
}
