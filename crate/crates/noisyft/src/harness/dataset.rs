//! Instruction-dataset ingestion: one JSON object per line with keys
//! `instruction`, optional `input`, and `output`. Only single-turn records
//! are accepted; multi-turn conversation formats are out of scope.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    /// Extra context for the instruction. An empty string in the source
    /// file is normalized to `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

/// Loads a JSONL instruction dataset, preserving record order. Whitespace-
/// only lines are skipped; any malformed line fails the whole load with
/// its 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: InstructionExample = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("line {lineno}: {e}")))?;
        if ex.instruction.is_empty() {
            return Err(Error::Dataset(format!(
                "line {lineno}: instruction must be nonempty"
            )));
        }
        if ex.output.is_empty() {
            return Err(Error::Dataset(format!(
                "line {lineno}: output must be nonempty"
            )));
        }
        if ex.input.as_deref() == Some("") {
            ex.input = None;
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::Dataset(format!("{}: empty dataset", path.display())));
    }
    Ok(examples)
}
