//! Candidates as JSON lines: one object per line, each carrying
//! `schema_version` next to the candidate fields.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ModerationCandidate, PipelineError};

pub const CANDIDATE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    candidate: &'a ModerationCandidate,
}

#[derive(Deserialize)]
struct LineIn {
    schema_version: u32,
    #[serde(flatten)]
    candidate: serde_json::Map<String, serde_json::Value>,
}

pub fn write_jsonl<W: Write>(mut out: W, candidates: &[ModerationCandidate]) -> Result<(), PipelineError> {
    for c in candidates {
        let line = LineOut {
            schema_version: CANDIDATE_SCHEMA_VERSION,
            candidate: c,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| PipelineError::Export(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| PipelineError::Export(e.to_string()))?;
    }
    out.flush().map_err(|e| PipelineError::Export(e.to_string()))
}

/// Reads lines written by [`write_jsonl`]. Blank lines are skipped; a line
/// with another schema version or unknown fields is an error.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ModerationCandidate>, PipelineError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Export(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LineIn =
            serde_json::from_str(&line).map_err(|e| PipelineError::Export(format!("line {}: {e}", n + 1)))?;
        if parsed.schema_version != CANDIDATE_SCHEMA_VERSION {
            return Err(PipelineError::Export(format!(
                "line {}: schema_version {} is not supported",
                n + 1,
                parsed.schema_version
            )));
        }
        let c = serde_json::from_value(serde_json::Value::Object(parsed.candidate))
            .map_err(|e| PipelineError::Export(format!("line {}: {e}", n + 1)))?;
        out.push(c);
    }
    Ok(out)
}
