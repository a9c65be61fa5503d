use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Split;
use crate::interventions::PredictionState;
use crate::model::{Pgcm, Result};
use crate::tensor::{Real, Tensor};

use super::{predict_split_with, report_from_predictions, split_concept_labels, EVAL_CHUNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveMode {
    Standard,
    Propagating,
}

impl CurveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveMode::Standard => "standard",
            CurveMode::Propagating => "propagating",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub t: usize,
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionCurve {
    pub mode: CurveMode,
    pub seed: u64,
    /// Concept slots `part * k + concept` in intervention order.
    pub order: Vec<usize>,
    pub points: Vec<CurvePoint>,
}

impl InterventionCurve {
    pub const CSV_HEADER: &'static str = "t,concept_acc,task_acc,mode,seed";

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        self.points
            .iter()
            .map(|p| format!("{},{:.6},{:.6},{},{}\n", p.t, p.concept_accuracy, p.task_accuracy, self.mode.as_str(), self.seed))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }
}

/// The random policy: one permutation of all `n * k` slots, shared by every
/// instance and every mode.
pub fn policy_order(slots: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..slots).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn intervention_curve<T: Real>(model: &Pgcm<T>, split: &Split, mode: CurveMode, seed: u64) -> Result<InterventionCurve> {
    Ok(intervention_curves(model, split, &[mode], seed)?.remove(0))
}

/// Curves for several modes over the same instances and the same order.
pub fn intervention_curves<T: Real>(
    model: &Pgcm<T>,
    split: &Split,
    modes: &[CurveMode],
    seed: u64,
) -> Result<Vec<InterventionCurve>> {
    let (n, k) = (model.config.parts, model.config.concepts);
    let slots = n * k;
    let order = policy_order(slots, seed);
    let view = model.prototype_view()?;
    let plain = predict_split_with(model, &view, split)?;
    let labels = split_concept_labels(split);
    let m = view.active.len();
    let count = split.len();

    let mut curves = Vec::with_capacity(modes.len());
    for &mode in modes {
        // hard[t] holds the [N * n, k] hard concepts after t interventions
        let mut hard = vec![Vec::with_capacity(count * slots); slots + 1];
        for inst in 0..count {
            let rows = inst * n..(inst + 1) * n;
            let mut state = PredictionState::from_rows(
                &view,
                model.config.tau,
                &plain.selector[rows.start * m..rows.end * m],
                &plain.concepts[rows.start * k..rows.end * k],
                n,
            );
            hard[0].extend(state.hard_concepts());
            for (t, &slot) in order.iter().enumerate() {
                let (part, concept) = (slot / k, slot % k);
                let value = labels[(inst * n + part) * k + concept];
                match mode {
                    CurveMode::Standard => state.concept_standard(part, concept, value)?,
                    CurveMode::Propagating => state.concept_propagating(part, concept, value)?,
                }
                hard[t + 1].extend(state.hard_concepts());
            }
        }
        let mut points = Vec::with_capacity(slots + 1);
        for (t, bits) in hard.iter().enumerate() {
            let task = if t == 0 { plain.task.clone() } else { predict_task_chunked(model, bits, slots)? };
            let r = report_from_predictions(bits, &task, split, model.config.task_classes, seed, "");
            points.push(CurvePoint { t, concept_accuracy: r.concept_accuracy, task_accuracy: r.task_accuracy });
        }
        curves.push(InterventionCurve { mode, seed, order: order.clone(), points });
    }
    Ok(curves)
}

fn predict_task_chunked<T: Real>(model: &Pgcm<T>, bits: &[bool], width: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(bits.len() / width);
    for chunk in bits.chunks(EVAL_CHUNK * width) {
        let data = chunk.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let input = Tensor::new(vec![chunk.len() / width, width], data)?;
        out.extend(model.predict_task(&input)?.argmax_rows());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_is_a_seeded_permutation() {
        let a = policy_order(20, 3);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, policy_order(20, 3));
        assert_ne!(a, policy_order(20, 4));
    }
}
