//! Metrics and the experiments built on them.

mod cbm;
mod curve;
mod experiments;

pub use cbm::{train_cbm_baseline, Cbm, CbmReport};
pub use curve::{intervention_curve, intervention_curves, CurveMode, CurvePoint, InterventionCurve};
pub use experiments::{
    misaligned_prototypes, prototype_count_sweep, run_editing_experiment, EditingReport, SweepPoint, DEFAULT_SWEEP,
};

use crate::data::{Split, NUM_DIGITS};
use crate::model::{Pgcm, PrototypeView, Result, HARD_THRESHOLD};
use crate::tensor::{argmax, Real, Tensor};
use crate::training::part_matrix;

/// Confusion counts of one binary concept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(TPR + TNR) / 2`; a rate with no samples on its side counts as 1.
    /// `None` when there are no samples at all.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos + neg == 0 {
            return None;
        }
        let tpr = if pos == 0 { 1.0 } else { self.tp as f64 / pos as f64 };
        let tnr = if neg == 0 { 1.0 } else { self.tn as f64 / neg as f64 };
        Some((tpr + tnr) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAccuracy {
    pub confusion: Vec<Confusion>,
    pub per_concept: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-concept balanced accuracy of row-major `[N, k]` predictions.
pub fn balanced_concept_accuracy(predictions: &[bool], labels: &[bool], k: usize) -> ConceptAccuracy {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels must align");
    assert!(k > 0 && predictions.len().is_multiple_of(k), "rows of {k} concepts");
    let mut confusion = vec![Confusion::default(); k];
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        let c = &mut confusion[i % k];
        match (p, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let per_concept: Vec<Option<f64>> = confusion.iter().map(Confusion::balanced_accuracy).collect();
    let defined: Vec<f64> = per_concept.iter().flatten().copied().collect();
    let mean = if defined.is_empty() { 1.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    ConceptAccuracy { confusion, per_concept, mean }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub concept: ConceptAccuracy,
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    /// `task_confusion[truth][predicted]`.
    pub task_confusion: Vec<Vec<usize>>,
    pub instances: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "concept_accuracy={:.6}\ntask_accuracy={:.6}\ninstances={}\nseed={}\ndataset_fingerprint={}\n",
            self.concept_accuracy, self.task_accuracy, self.instances, self.seed, self.dataset_fingerprint
        );
        for (l, (acc, c)) in self.concept.per_concept.iter().zip(&self.concept.confusion).enumerate() {
            let acc = acc.map_or("undefined".to_string(), |a| format!("{a:.6}"));
            s.push_str(&format!("concept.{l}={acc} tp={} fp={} tn={} fn={}\n", c.tp, c.fp, c.tn, c.fn_));
        }
        s
    }

    pub fn to_container(&self) -> crate::container::Container {
        let mut c = crate::container::Container::new("PGCM-METRICS", 1);
        c.set("concept_accuracy", format!("{:?}", self.concept_accuracy));
        c.set("task_accuracy", format!("{:?}", self.task_accuracy));
        c.set("instances", self.instances);
        c.set("seed", self.seed);
        c.set("dataset_fingerprint", &self.dataset_fingerprint);
        for (l, acc) in self.concept.per_concept.iter().enumerate() {
            c.set(&format!("concept.{l}"), acc.map_or("undefined".to_string(), |a| format!("{a:?}")));
        }
        let counts: Vec<f32> =
            self.concept.confusion.iter().flat_map(|c| [c.tp, c.fp, c.tn, c.fn_]).map(|v| v as f32).collect();
        c.add_f32("concept_confusion", &[self.concept.confusion.len(), 4], &counts);
        let classes = self.task_confusion.len();
        let task: Vec<f32> = self.task_confusion.iter().flatten().map(|&v| v as f32).collect();
        c.add_f32("task_confusion", &[classes, classes], &task);
        c
    }
}

/// Plain predictions for a whole split, parts in instance-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPredictions<T> {
    pub active: Vec<usize>,
    /// `[P, m_active]`
    pub selector: Vec<T>,
    /// `[P, k]` posterior predictive concepts.
    pub concepts: Vec<T>,
    /// Argmax task class per instance.
    pub task: Vec<usize>,
}

pub(crate) const EVAL_CHUNK: usize = 512;

pub fn predict_split<T: Real>(model: &Pgcm<T>, split: &Split) -> Result<SplitPredictions<T>> {
    predict_split_with(model, &model.prototype_view()?, split)
}

pub fn predict_split_with<T: Real>(model: &Pgcm<T>, view: &PrototypeView<T>, split: &Split) -> Result<SplitPredictions<T>> {
    let mut out = SplitPredictions { active: view.active.clone(), selector: Vec::new(), concepts: Vec::new(), task: Vec::new() };
    for chunk in split.instances.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let pred = model.predict_parts_with(view, &part_matrix(&refs))?;
        let task = model.predict_task(&model.hard_task_input(&pred.concepts)?)?;
        out.task.extend(task.argmax_rows());
        out.selector.extend_from_slice(pred.selector.data());
        out.concepts.extend_from_slice(pred.concepts.data());
    }
    Ok(out)
}

/// Concept labels `[P, k]` of a split.
pub fn split_concept_labels(split: &Split) -> Vec<bool> {
    split.parts().flat_map(|p| p.concepts()).collect()
}

pub fn task_labels(split: &Split) -> Vec<usize> {
    split.instances.iter().map(|i| i.task_label as usize).collect()
}

/// Builds a report from hard concepts `[P, k]` and predicted task classes.
pub fn report_from_predictions(
    hard: &[bool],
    task: &[usize],
    split: &Split,
    task_classes: usize,
    seed: u64,
    fingerprint: &str,
) -> MetricsReport {
    let concept = balanced_concept_accuracy(hard, &split_concept_labels(split), NUM_DIGITS);
    let truth = task_labels(split);
    let mut task_confusion = vec![vec![0usize; task_classes]; task_classes];
    for (&y, &p) in truth.iter().zip(task) {
        task_confusion[y][p] += 1;
    }
    let correct = truth.iter().zip(task).filter(|(y, p)| y == p).count();
    MetricsReport {
        concept_accuracy: concept.mean,
        concept,
        task_accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
        task_confusion,
        instances: truth.len(),
        seed,
        dataset_fingerprint: fingerprint.to_string(),
    }
}

pub fn evaluate<T: Real>(model: &Pgcm<T>, split: &Split, seed: u64, fingerprint: &str) -> Result<MetricsReport> {
    let pred = predict_split(model, split)?;
    let t = T::lit(HARD_THRESHOLD);
    let hard: Vec<bool> = pred.concepts.iter().map(|&p| p > t).collect();
    Ok(report_from_predictions(&hard, &pred.task, split, model.config.task_classes, seed, fingerprint))
}

/// Task accuracy of the task head fed the ground-truth concept labels.
pub fn ground_truth_task_accuracy<T: Real>(model: &Pgcm<T>, split: &Split) -> Result<f64> {
    let labels = split_concept_labels(split);
    let width = model.config.parts * model.config.concepts;
    let data: Vec<T> = labels.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let input = Tensor::new(vec![split.len(), width], data)?;
    let probs = model.predict_task(&input)?;
    let truth = task_labels(split);
    let correct = (0..split.len()).filter(|&i| argmax(probs.row(i)) == truth[i]).count();
    Ok(correct as f64 / split.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [true, false, false, true, false, true];
        let acc = balanced_concept_accuracy(&labels, &labels, 2);
        assert_eq!(acc.per_concept, vec![Some(1.0), Some(1.0)]);
        assert_eq!(acc.mean, 1.0);
    }

    #[test]
    fn constant_zero_is_one_half() {
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let acc = balanced_concept_accuracy(&[false; 10], &labels, 1);
        assert_eq!(acc.mean, 0.5);
    }

    #[test]
    fn hand_confusion() {
        // labels 1,1,0,0; predictions 1,0,1,0: TPR 1/2, TNR 1/2
        let acc = balanced_concept_accuracy(&[true, false, true, false], &[true, true, false, false], 1);
        assert_eq!(acc.confusion[0], Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(acc.mean, 0.5);
        // labels 1,0,0,0; predictions 1,1,0,0: TPR 1, TNR 2/3
        let acc = balanced_concept_accuracy(&[true, true, false, false], &[true, false, false, false], 1);
        assert!((acc.mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_side_counts_as_one_without_errors() {
        // no positives, one false positive out of four
        let acc = balanced_concept_accuracy(&[true, false, false, false], &[false; 4], 1);
        assert_eq!(acc.mean, (1.0 + 0.75) / 2.0);
    }
}
