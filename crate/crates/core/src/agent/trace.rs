//! JSONL trace log: one record per policy invocation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::parse::PlanSpec;
use super::AgentError;
use crate::evaluator::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub session_id: String,
    pub case_id: String,
    pub round: u8,
    pub index: usize,
    pub attempt: u32,
    pub prompt_sha256: String,
    pub raw_output: String,
    pub rationale: String,
    pub objectives: Option<PlanSpec>,
    pub metrics: Option<MetricsReport>,
    pub format_error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_error_detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<String>,
    pub duration_ms: u64,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub trait TraceSink {
    fn append(&mut self, record: &TraceRecord) -> Result<(), AgentError>;
}

impl TraceSink for Vec<TraceRecord> {
    fn append(&mut self, record: &TraceRecord) -> Result<(), AgentError> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends records to a JSONL file, flushing after each one.
pub struct JsonlTraceWriter {
    out: BufWriter<File>,
}

impl JsonlTraceWriter {
    pub fn append_to(path: &Path) -> Result<Self, AgentError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { out: BufWriter::new(file) })
    }
}

impl TraceSink for JsonlTraceWriter {
    fn append(&mut self, record: &TraceRecord) -> Result<(), AgentError> {
        let line = serde_json::to_string(record).map_err(|e| AgentError::Io(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| AgentError::Io(e.to_string()))?;
        self.out.flush().map_err(|e| AgentError::Io(e.to_string()))
    }
}

/// Forwards every record to two sinks.
pub struct Tee<'a, A: TraceSink + ?Sized, B: TraceSink + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: TraceSink + ?Sized, B: TraceSink + ?Sized> TraceSink for Tee<'_, A, B> {
    fn append(&mut self, record: &TraceRecord) -> Result<(), AgentError> {
        self.0.append(record)?;
        self.1.append(record)
    }
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceRecord>, AgentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| AgentError::Io(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>, AgentError> {
    let file = File::open(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AgentError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AgentError::Io(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
