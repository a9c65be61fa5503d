//! Append-only record of bank edits, stored as JSON lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pgcm::interventions::EditRequest;
use pgcm::model::{ModelError, Pgcm};

use crate::wire::SourceJson;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditJson {
    Relabel { prototype: usize, bits: Vec<bool> },
    Remove { prototype: usize },
    /// `pixels` is the flat `[C * H * W]` image.
    Add { pixels: Vec<f32>, bits: Option<Vec<bool>>, source: Option<SourceJson> },
}

impl From<&EditJson> for EditRequest {
    fn from(e: &EditJson) -> Self {
        match e {
            EditJson::Relabel { prototype, bits } => EditRequest::Relabel { prototype: *prototype, bits: bits.clone() },
            EditJson::Remove { prototype } => EditRequest::Remove { prototype: *prototype },
            EditJson::Add { pixels, bits, source } => {
                EditRequest::Add { pixels: pixels.clone(), bits: bits.clone(), source: source.map(Into::into) }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: u64,
    pub timestamp_ms: u64,
    pub edit: EditJson,
    /// Prototype index the edit touched (the new index for additions).
    pub index: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal io: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("journal entry {id} failed to replay: {source}")]
    Replay { id: u64, source: ModelError },
    #[error("journal entry {id} replayed onto prototype {got}, recorded {recorded}")]
    Diverged { id: u64, got: usize, recorded: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Journal {
    pub entries: Vec<JournalEntry>,
}

impl Journal {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.id + 1)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("journal entries serialize") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, JournalError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|source| JournalError::Parse { line: i + 1, source })?);
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self, JournalError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), JournalError> {
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Applies every entry in order to a copy of `base`.
    pub fn replay(&self, base: &Pgcm<f32>) -> Result<Pgcm<f32>, JournalError> {
        let mut model = base.clone();
        for e in &self.entries {
            let got = model.apply_edit(&(&e.edit).into()).map_err(|source| JournalError::Replay { id: e.id, source })?;
            if got != e.index {
                return Err(JournalError::Diverged { id: e.id, got, recorded: e.index });
            }
        }
        Ok(model)
    }
}
