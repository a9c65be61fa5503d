use crate::tensor::Real;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Learned,
    Swapped,
    Added,
    Removed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Learned => "learned",
            Status::Swapped => "swapped",
            Status::Added => "added",
            Status::Removed => "removed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "learned" => Status::Learned,
            "swapped" => Status::Swapped,
            "added" => Status::Added,
            "removed" => Status::Removed,
            _ => return None,
        })
    }
}

/// Where a stored prototype image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartSource {
    pub part_id: u64,
    /// Digit actually drawn in that part.
    pub digit: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeEntry<T> {
    /// Learned embedding, present only while `status == Learned`.
    pub embedding: Option<Vec<T>>,
    /// Frozen image, present after swapping or when added by hand.
    pub stored_image: Option<Vec<T>>,
    /// Exact concept bits replacing the concept decoder output.
    pub concept_override: Option<Vec<bool>>,
    pub status: Status,
    pub source: Option<PartSource>,
}

impl<T: Real> PrototypeEntry<T> {
    pub fn learned(embedding: Vec<T>) -> Self {
        Self { embedding: Some(embedding), stored_image: None, concept_override: None, status: Status::Learned, source: None }
    }

    pub fn is_active(&self) -> bool {
        self.status != Status::Removed
    }
}

/// The prototype bank. Indices are stable: removal only flips the status.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub entries: Vec<PrototypeEntry<T>>,
    pub dim: usize,
}

impl<T: Real> PrototypeBank<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of active entries, ascending.
    pub fn active(&self) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.is_active()).map(|(i, _)| i).collect()
    }

    pub fn num_active(&self) -> usize {
        self.entries.iter().filter(|e| e.is_active()).count()
    }

    pub fn get(&self, j: usize) -> Result<&PrototypeEntry<T>, ModelError> {
        self.entries.get(j).ok_or(ModelError::UnknownPrototype(j))
    }

    pub fn active_entry(&self, j: usize) -> Result<&PrototypeEntry<T>, ModelError> {
        let e = self.get(j)?;
        if !e.is_active() {
            return Err(ModelError::RemovedPrototype(j));
        }
        Ok(e)
    }

    pub fn active_entry_mut(&mut self, j: usize) -> Result<&mut PrototypeEntry<T>, ModelError> {
        self.active_entry(j)?;
        Ok(&mut self.entries[j])
    }

    /// Active entries still carrying a learned embedding.
    pub fn learned_active(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.status == Status::Learned)
            .map(|(i, _)| i)
            .collect()
    }
}
