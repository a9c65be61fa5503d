//! Test-time interventions on a single prediction and persistent edits of the
//! prototype bank.

use crate::model::{ModelError, PartSource, Pgcm, PrototypeEntry, PrototypeView, Result, Status, HARD_THRESHOLD};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum InterventionKind {
    ConceptStandard { concept: usize, value: bool },
    /// Also removes the selector mass of prototypes that disagree at `tau`.
    ConceptPropagating { concept: usize, value: bool },
    PrototypeForce { prototype: usize },
    PrototypeExclude { prototypes: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionRequest {
    pub part_index: usize,
    pub kind: InterventionKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditRequest {
    Relabel { prototype: usize, bits: Vec<bool> },
    Remove { prototype: usize },
    Add { pixels: Vec<f32>, bits: Option<Vec<bool>>, source: Option<PartSource> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartState<T> {
    /// Selector over `active`, in the same order.
    pub selector: Vec<T>,
    pub concepts: Vec<T>,
    /// Concepts asserted by the user; survive later selector changes.
    pub clamps: Vec<Option<bool>>,
}

/// Mutable prediction for one instance. Starts from the model's plain
/// prediction; interventions only touch this state.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionState<T> {
    pub active: Vec<usize>,
    /// `[m_active, k]` prototype concept probabilities.
    pub prototype_concepts: Tensor<T>,
    pub tau: f64,
    pub parts: Vec<PartState<T>>,
}

impl<T: Real> PredictionState<T> {
    /// Plain prediction for one instance's parts `[n, D]`.
    pub fn new(model: &Pgcm<T>, view: &PrototypeView<T>, parts: &Tensor<T>) -> Result<Self> {
        let pred = model.predict_parts_with(view, parts)?;
        Ok(Self::from_rows(view, model.config.tau, pred.selector.data(), pred.concepts.data(), pred.selector.dims2().0))
    }

    /// Builds the state from precomputed rows (`rows` parts).
    pub fn from_rows(view: &PrototypeView<T>, tau: f64, selector: &[T], concepts: &[T], rows: usize) -> Self {
        let m = view.active.len();
        let k = view.concepts.dims2().1;
        let parts = (0..rows)
            .map(|r| PartState {
                selector: selector[r * m..(r + 1) * m].to_vec(),
                concepts: concepts[r * k..(r + 1) * k].to_vec(),
                clamps: vec![None; k],
            })
            .collect();
        Self { active: view.active.clone(), prototype_concepts: view.concepts.clone(), tau, parts }
    }

    pub fn num_concepts(&self) -> usize {
        self.prototype_concepts.dims2().1
    }

    fn part_mut(&mut self, i: usize) -> Result<&mut PartState<T>> {
        let n = self.parts.len();
        self.parts.get_mut(i).ok_or_else(|| ModelError::Input(format!("part {i} out of range (n = {n})")))
    }

    fn check_concept(&self, l: usize) -> Result<()> {
        if l >= self.num_concepts() {
            return Err(ModelError::Input(format!("concept {l} out of range (k = {})", self.num_concepts())));
        }
        Ok(())
    }

    fn position(&self, j: usize) -> Result<usize> {
        self.active.binary_search(&j).map_err(|_| ModelError::RemovedPrototype(j))
    }

    /// Recomputes a part's mixture from its selector, then reapplies clamps.
    fn remix(&mut self, i: usize) {
        let (m, k) = self.prototype_concepts.dims2();
        let pi = self.prototype_concepts.data().to_vec();
        let part = &mut self.parts[i];
        for l in 0..k {
            let mut acc = T::zero();
            for j in 0..m {
                acc = acc + part.selector[j] * pi[j * k + l];
            }
            part.concepts[l] = acc;
        }
        for (c, clamp) in part.concepts.iter_mut().zip(&part.clamps) {
            if let Some(v) = clamp {
                *c = if *v { T::one() } else { T::zero() };
            }
        }
    }

    pub fn concept_standard(&mut self, i: usize, l: usize, value: bool) -> Result<()> {
        self.check_concept(l)?;
        let part = self.part_mut(i)?;
        part.clamps[l] = Some(value);
        part.concepts[l] = if value { T::one() } else { T::zero() };
        Ok(())
    }

    pub fn concept_propagating(&mut self, i: usize, l: usize, value: bool) -> Result<()> {
        self.check_concept(l)?;
        self.part_mut(i)?;
        let k = self.num_concepts();
        let tau = T::lit(self.tau);
        let pi = self.prototype_concepts.data();
        let agrees: Vec<bool> = (0..self.active.len()).map(|j| (pi[j * k + l] > tau) == value).collect();
        let part = &mut self.parts[i];
        let mass: T = part.selector.iter().zip(&agrees).filter(|(_, &a)| a).map(|(&q, _)| q).sum();
        if !agrees.iter().any(|&a| a) || mass <= T::zero() {
            return self.concept_standard(i, l, value);
        }
        for (q, &a) in part.selector.iter_mut().zip(&agrees) {
            *q = if a { *q / mass } else { T::zero() };
        }
        part.clamps[l] = Some(value);
        self.remix(i);
        Ok(())
    }

    pub fn prototype_force(&mut self, i: usize, j: usize) -> Result<()> {
        let pos = self.position(j)?;
        let part = self.part_mut(i)?;
        for (p, q) in part.selector.iter_mut().enumerate() {
            *q = if p == pos { T::one() } else { T::zero() };
        }
        self.remix(i);
        Ok(())
    }

    pub fn prototype_exclude(&mut self, i: usize, excluded: &[usize]) -> Result<()> {
        let mut drop = vec![false; self.active.len()];
        for &j in excluded {
            drop[self.position(j)?] = true;
        }
        if drop.iter().all(|&d| d) {
            return Err(ModelError::NoActivePrototypes);
        }
        let part = self.part_mut(i)?;
        let mass: T = part.selector.iter().zip(&drop).filter(|(_, &d)| !d).map(|(&q, _)| q).sum();
        let kept = drop.iter().filter(|&&d| !d).count();
        for (q, &d) in part.selector.iter_mut().zip(&drop) {
            *q = if d {
                T::zero()
            } else if mass > T::zero() {
                *q / mass
            } else {
                T::one() / T::lit(kept as f64)
            };
        }
        self.remix(i);
        Ok(())
    }

    pub fn apply(&mut self, req: &InterventionRequest) -> Result<()> {
        let i = req.part_index;
        match &req.kind {
            InterventionKind::ConceptStandard { concept, value } => self.concept_standard(i, *concept, *value),
            InterventionKind::ConceptPropagating { concept, value } => self.concept_propagating(i, *concept, *value),
            InterventionKind::PrototypeForce { prototype } => self.prototype_force(i, *prototype),
            InterventionKind::PrototypeExclude { prototypes } => self.prototype_exclude(i, prototypes),
        }
    }

    pub fn hard_concepts(&self) -> Vec<bool> {
        let t = T::lit(HARD_THRESHOLD);
        self.parts.iter().flat_map(|p| p.concepts.iter().map(move |&c| c > t)).collect()
    }

    /// `[1, n * k]` task head input.
    pub fn task_input(&self) -> Tensor<T> {
        let bits = self.hard_concepts();
        let data = bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(vec![1, bits.len()], data).expect("task input")
    }

    pub fn task_distribution(&self, model: &Pgcm<T>) -> Result<Vec<T>> {
        Ok(model.predict_task(&self.task_input())?.into_data())
    }

    /// Argmax of each part's selector, as bank indices.
    pub fn selected_prototypes(&self) -> Vec<usize> {
        self.parts.iter().map(|p| self.active[crate::tensor::argmax(&p.selector)]).collect()
    }
}

impl<T: Real> Pgcm<T> {
    /// Replaces prototype `j`'s concept representation by `bits`.
    pub fn relabel_prototype(&mut self, j: usize, bits: &[bool]) -> Result<()> {
        if bits.len() != self.config.concepts {
            return Err(ModelError::Input(format!("{} bits for {} concepts", bits.len(), self.config.concepts)));
        }
        self.bank.active_entry_mut(j)?.concept_override = Some(bits.to_vec());
        Ok(())
    }

    pub fn remove_prototype(&mut self, j: usize) -> Result<()> {
        self.bank.active_entry(j)?;
        if self.bank.num_active() == 1 {
            return Err(ModelError::LastPrototype(j));
        }
        self.bank.entries[j].status = Status::Removed;
        Ok(())
    }

    /// Appends a prototype whose image is `pixels`; returns its index.
    pub fn add_prototype(&mut self, pixels: &[T], bits: Option<&[bool]>, source: Option<PartSource>) -> Result<usize> {
        if pixels.len() != self.config.part_dim() {
            return Err(ModelError::Input(format!("{} pixels, expected {}", pixels.len(), self.config.part_dim())));
        }
        if pixels.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(ModelError::Input("pixels must lie in [0, 1]".into()));
        }
        if let Some(b) = bits {
            if b.len() != self.config.concepts {
                return Err(ModelError::Input(format!("{} bits for {} concepts", b.len(), self.config.concepts)));
            }
        }
        self.bank.entries.push(PrototypeEntry {
            embedding: None,
            stored_image: Some(pixels.to_vec()),
            concept_override: bits.map(|b| b.to_vec()),
            status: Status::Added,
            source,
        });
        Ok(self.bank.len() - 1)
    }

    /// Applies an edit; returns the affected prototype index.
    pub fn apply_edit(&mut self, edit: &EditRequest) -> Result<usize> {
        match edit {
            EditRequest::Relabel { prototype, bits } => self.relabel_prototype(*prototype, bits).map(|_| *prototype),
            EditRequest::Remove { prototype } => self.remove_prototype(*prototype).map(|_| *prototype),
            EditRequest::Add { pixels, bits, source } => {
                let px: Vec<T> = pixels.iter().map(|&v| T::lit(v as f64)).collect();
                self.add_prototype(&px, bits.as_deref(), *source)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(pi: &[f64], m: usize, k: usize) -> PrototypeView<f64> {
        PrototypeView {
            active: (0..m).collect(),
            images: Tensor::zeros(&[m, 1]),
            embeddings: Tensor::zeros(&[m, 1]),
            concepts: Tensor::new(vec![m, k], pi.to_vec()).unwrap(),
        }
    }

    fn state(pi: &[f64], m: usize, k: usize, q: &[f64]) -> PredictionState<f64> {
        let v = view(pi, m, k);
        let c = Tensor::new(vec![1, m], q.to_vec()).unwrap().matmul(&v.concepts, false).unwrap();
        PredictionState::from_rows(&v, 0.5, q, c.data(), 1)
    }

    #[test]
    fn propagating_renormalizes_onto_agreeing_prototypes() {
        // concept 0 separates the prototypes, concept 1 differs too
        let mut s = state(&[1.0, 0.2, 0.0, 0.9], 2, 2, &[0.5, 0.5]);
        s.concept_propagating(0, 0, true).unwrap();
        assert_eq!(s.parts[0].selector, vec![1.0, 0.0]);
        assert_eq!(s.parts[0].concepts, vec![1.0, 0.2]);
    }

    #[test]
    fn propagating_with_no_disagreement_only_clamps() {
        let mut s = state(&[0.9, 0.3, 0.8, 0.6], 2, 2, &[0.4, 0.6]);
        let before = s.parts[0].selector.clone();
        s.concept_propagating(0, 0, true).unwrap();
        assert_eq!(s.parts[0].selector, before);
        assert_eq!(s.parts[0].concepts[0], 1.0);
        assert!((s.parts[0].concepts[1] - (0.4 * 0.3 + 0.6 * 0.6)).abs() < 1e-15);
    }

    #[test]
    fn propagating_falls_back_when_everyone_disagrees() {
        let pi = [0.1, 0.3, 0.2, 0.6];
        let mut a = state(&pi, 2, 2, &[0.4, 0.6]);
        let mut b = a.clone();
        a.concept_propagating(0, 0, true).unwrap();
        b.concept_standard(0, 0, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exclude_renormalizes() {
        let mut s = state(&[0.0; 3], 3, 1, &[0.5, 0.3, 0.2]);
        s.prototype_exclude(0, &[0]).unwrap();
        let q = &s.parts[0].selector;
        assert_eq!(q[0], 0.0);
        assert!((q[1] - 0.6).abs() < 1e-15 && (q[2] - 0.4).abs() < 1e-15);
        assert!(matches!(s.prototype_exclude(0, &[0, 1, 2]), Err(ModelError::NoActivePrototypes)));
    }

    #[test]
    fn exclude_complement_equals_force() {
        let pi = [0.9, 0.1, 0.2, 0.7, 0.4, 0.4];
        let mut a = state(&pi, 3, 2, &[0.2, 0.5, 0.3]);
        let mut b = a.clone();
        a.prototype_exclude(0, &[0, 2]).unwrap();
        b.prototype_force(0, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.parts[0].concepts, vec![0.2, 0.7]);
    }

    #[test]
    fn standard_touches_one_concept() {
        let mut s = state(&[0.9, 0.1, 0.2, 0.7], 2, 2, &[0.5, 0.5]);
        let before = s.parts[0].concepts[1];
        s.concept_standard(0, 0, false).unwrap();
        assert_eq!(s.parts[0].concepts, vec![0.0, before]);
        assert!(s.concept_standard(0, 2, true).is_err());
        assert!(s.concept_standard(1, 0, true).is_err());
    }

    #[test]
    fn force_keeps_earlier_clamps() {
        let mut s = state(&[0.9, 0.1, 0.2, 0.7], 2, 2, &[0.5, 0.5]);
        s.concept_standard(0, 1, true).unwrap();
        s.prototype_force(0, 0).unwrap();
        assert_eq!(s.parts[0].concepts, vec![0.9, 1.0]);
    }
}
