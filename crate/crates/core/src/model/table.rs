use crate::tensor::Real;

use super::{Pgcm, Result, Status};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRow<T> {
    pub index: usize,
    pub status: Status,
    /// `[C, H, W]` image representation: stored image, else decoded mode.
    pub image: Vec<T>,
    /// Concept probabilities, override-aware.
    pub concepts: Vec<T>,
    /// `{ l : concepts[l] > tau }`, ascending.
    pub active_concepts: Vec<usize>,
}

/// Prototype index -> (image representation, concept representation).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAlignmentTable<T> {
    pub tau: f64,
    pub rows: Vec<AlignmentRow<T>>,
}

impl<T: Real> ConceptAlignmentTable<T> {
    pub fn row(&self, j: usize) -> Option<&AlignmentRow<T>> {
        self.rows.iter().find(|r| r.index == j)
    }
}

impl<T: Real> Pgcm<T> {
    pub fn build_alignment_table(&self, tau: f64) -> Result<ConceptAlignmentTable<T>> {
        let view = self.prototype_view()?;
        let threshold = T::lit(tau);
        let rows = view
            .active
            .iter()
            .enumerate()
            .map(|(pos, &j)| {
                let concepts = view.concepts.row(pos).to_vec();
                let active_concepts = concepts.iter().enumerate().filter(|(_, &p)| p > threshold).map(|(l, _)| l).collect();
                AlignmentRow {
                    index: j,
                    status: self.bank.entries[j].status,
                    image: view.images.row(pos).to_vec(),
                    concepts,
                    active_concepts,
                }
            })
            .collect();
        Ok(ConceptAlignmentTable { tau, rows })
    }

    /// Prototypes whose concept `l` is active at `tau`, by descending
    /// probability (ascending index on ties). The concept holds for a part iff
    /// the part looks like one of them.
    pub fn concept_semantics(&self, concept: usize, tau: f64) -> Result<Vec<usize>> {
        if concept >= self.config.concepts {
            return Err(super::ModelError::Input(format!("concept {concept} out of range")));
        }
        let view = self.prototype_view()?;
        let threshold = T::lit(tau);
        let mut hits: Vec<(usize, T)> = view
            .active
            .iter()
            .enumerate()
            .map(|(pos, &j)| (j, view.concepts.row(pos)[concept]))
            .filter(|&(_, p)| p > threshold)
            .collect();
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        Ok(hits.into_iter().map(|(j, _)| j).collect())
    }
}
