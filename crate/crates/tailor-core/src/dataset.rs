//! Instruction-data domain types and line-delimited JSON I/O.
//!
//! A dataset file holds one JSON object per line. Unknown fields on input
//! are kept in the record's `extra` map and echoed back on output so
//! upstream metadata survives the pipeline. Text fields are trimmed of
//! leading/trailing whitespace on load; internal whitespace and casing are
//! never touched, since downstream scoring is tokenizer-sensitive.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Errors from dataset loading, validation and writing.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: not an object")]
    NotAnObject { line: usize },
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: missing or non-string field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("duplicate id `{id}` on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("sample `{id}`: {field} is empty after trimming")]
    EmptyField { id: String, field: &'static str },
    #[error("record `{seed_id}`: {reason}")]
    InvalidRecord { seed_id: String, reason: String },
    #[error("no records to write")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One instruction-response pair, the atom of every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    pub response: String,
    /// Unknown input fields, preserved verbatim and echoed to output.
    #[serde(flatten, default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

/// A generated candidate together with every score attached to it.
///
/// `pi_composite` is always `pi_llm * pi_dual`. Base candidates (produced
/// by the fixed base agent-pair) carry zero scores and no IFD values: they
/// anchor referee comparisons and win only by fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub seed_id: String,
    /// Pair label `rewriter:responder` (agent names).
    pub pair: String,
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifd_small: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifd_large: Option<f64>,
    pub pi_dual: f64,
    pub pi_llm: f64,
    pub pi_composite: f64,
    pub is_base: bool,
    #[serde(flatten, default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

/// Provenance label for an output record whose seed fell back to the base
/// candidate.
pub const BASE_PROVENANCE: &str = "base";

/// The winning instruction-response pair selected for one seed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub seed_id: String,
    pub instruction: String,
    pub response: String,
    /// Composite score of the winner; 0 when the base fallback was used.
    pub score: f64,
    /// Pair label `rewriter:responder`, or `"base"`.
    pub provenance: String,
    #[serde(flatten, default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

fn string_field(
    obj: &mut Map<String, Value>,
    field: &'static str,
    line: usize,
) -> Result<String, DatasetError> {
    match obj.remove(field) {
        Some(Value::String(s)) => Ok(s),
        _ => Err(DatasetError::MissingField { line, field }),
    }
}

/// Load a seed dataset, preserving file order.
///
/// Each line must be a JSON object with string `id`, `instruction` and
/// `response` fields. Instruction and response are trimmed; both must be
/// non-empty afterwards and ids must be unique.
pub fn load_seed_dataset(path: &Path) -> Result<Vec<InstructionSample>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            return Err(DatasetError::NotAnObject { line: line_no });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                line: line_no,
                detail: e.to_string(),
            })?;
        let Value::Object(mut obj) = value else {
            return Err(DatasetError::NotAnObject { line: line_no });
        };
        let id = string_field(&mut obj, "id", line_no)?;
        let instruction = string_field(&mut obj, "instruction", line_no)?
            .trim()
            .to_string();
        let response = string_field(&mut obj, "response", line_no)?
            .trim()
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { id, line: line_no });
        }
        if instruction.is_empty() {
            return Err(DatasetError::EmptyField { id, field: "instruction" });
        }
        if response.is_empty() {
            return Err(DatasetError::EmptyField { id, field: "response" });
        }
        samples.push(InstructionSample { id, instruction, response, extra: obj });
    }
    Ok(samples)
}

/// Validate a batch of output records without touching the filesystem.
///
/// Checkable invariants: scores are finite and in `[0, 1]`, base-provenance
/// records score exactly 0 (the base wins only when every candidate
/// composite is 0), texts are non-empty, and seed ids are unique.
pub fn validate_output_records(records: &[OutputRecord]) -> Result<(), DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::NoRecords);
    }
    let mut seen = HashSet::new();
    for rec in records {
        let invalid = |reason: String| DatasetError::InvalidRecord {
            seed_id: rec.seed_id.clone(),
            reason,
        };
        if rec.seed_id.is_empty() {
            return Err(invalid("empty seed_id".into()));
        }
        if !seen.insert(rec.seed_id.as_str()) {
            return Err(invalid("duplicate seed_id".into()));
        }
        if !rec.score.is_finite() || !(0.0..=1.0).contains(&rec.score) {
            return Err(invalid(format!("score {} outside [0, 1]", rec.score)));
        }
        if rec.provenance == BASE_PROVENANCE && rec.score != 0.0 {
            return Err(invalid(format!(
                "base provenance with nonzero score {}; base wins only when all candidate \
                 composites are 0",
                rec.score
            )));
        }
        if rec.provenance.is_empty() {
            return Err(invalid("empty provenance".into()));
        }
        if rec.instruction.trim().is_empty() || rec.response.trim().is_empty() {
            return Err(invalid("empty instruction or response".into()));
        }
    }
    Ok(())
}

/// Write output records as line-delimited JSON, validating first.
///
/// Nothing is written unless every record passes validation. Output is
/// UTF-8 with a trailing newline and preserves the given order.
pub fn write_output_dataset(records: &[OutputRecord], path: &Path) -> Result<(), DatasetError> {
    validate_output_records(records)?;
    let mut writer = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut writer, rec)
            .map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Load output records written by [`write_output_dataset`].
pub fn load_output_dataset(path: &Path) -> Result<Vec<OutputRecord>, DatasetError> {
    load_jsonl(path)
}

/// Load a candidate log (audit sidecar written by the pipeline).
pub fn load_candidate_log(path: &Path) -> Result<Vec<CandidateRecord>, DatasetError> {
    load_jsonl(path)
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}
