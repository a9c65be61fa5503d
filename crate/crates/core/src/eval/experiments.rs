use crate::checkpoint::ModelCheckpoint;
use crate::data::{corrupt_labels, GlyphSum, NUM_DIGITS};
use crate::model::{ModelError, Pgcm, Status};
use crate::tensor::Real;
use crate::training::{train, TrainConfig, TrainError};

use super::{evaluate, ground_truth_task_accuracy, MetricsReport};

pub const DEFAULT_SWEEP: [usize; 5] = [5, 10, 20, 30, 60];

/// Active prototypes with a stored image whose drawn digit disagrees with the
/// prototype's thresholded concept vector.
pub fn misaligned_prototypes<T: Real>(model: &Pgcm<T>) -> Result<Vec<usize>, ModelError> {
    let table = model.build_alignment_table(model.config.tau)?;
    let mut out = Vec::new();
    for row in &table.rows {
        let Some(src) = model.bank.entries[row.index].source else { continue };
        if row.active_concepts != [src.digit as usize] {
            out.push(row.index);
        }
    }
    Ok(out)
}

fn one_hot(digit: u8) -> Vec<bool> {
    (0..NUM_DIGITS).map(|l| l == digit as usize).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditingReport {
    pub seed: u64,
    pub misaligned: Vec<usize>,
    pub before: MetricsReport,
    pub after_remove: MetricsReport,
    pub after_relabel: MetricsReport,
    /// Prototypes left in place because removing them would empty the bank.
    pub kept: Vec<usize>,
}

impl EditingReport {
    pub fn remove_gain(&self) -> f64 {
        self.after_remove.concept_accuracy - self.before.concept_accuracy
    }

    pub fn relabel_gain(&self) -> f64 {
        self.after_relabel.concept_accuracy - self.before.concept_accuracy
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed={} misaligned={:?} before={:.6} after_remove={:.6} after_relabel={:.6} remove_gain={:+.6} relabel_gain={:+.6}\n",
            self.seed,
            self.misaligned,
            self.before.concept_accuracy,
            self.after_remove.concept_accuracy,
            self.after_relabel.concept_accuracy,
            self.remove_gain(),
            self.relabel_gain()
        )
    }
}

/// Applies both edit kinds to a model trained on noisy labels and measures
/// clean-test concept accuracy before and after.
pub fn edit_trained_model(model: &Pgcm<f32>, dataset: &GlyphSum, seed: u64) -> Result<EditingReport, ModelError> {
    let fp = dataset.fingerprint();
    let misaligned = misaligned_prototypes(model)?;
    let before = evaluate(model, &dataset.test, seed, &fp)?;

    let mut removed = model.clone();
    let mut kept = Vec::new();
    for &j in &misaligned {
        match removed.remove_prototype(j) {
            Ok(()) => {}
            Err(ModelError::LastPrototype(_)) => kept.push(j),
            Err(e) => return Err(e),
        }
    }
    let after_remove = evaluate(&removed, &dataset.test, seed, &fp)?;

    let mut relabeled = model.clone();
    for &j in &misaligned {
        let digit = relabeled.bank.entries[j].source.expect("misaligned entries have a source").digit;
        relabeled.relabel_prototype(j, &one_hot(digit))?;
    }
    let after_relabel = evaluate(&relabeled, &dataset.test, seed, &fp)?;
    Ok(EditingReport { seed, misaligned, before, after_remove, after_relabel, kept })
}

/// Trains on `corrupt_labels(dataset, prob, seed)` and runs both edits.
pub fn run_editing_experiment(
    config: &TrainConfig,
    dataset: &GlyphSum,
    prob: f64,
    seed: u64,
) -> Result<(ModelCheckpoint, EditingReport), TrainError> {
    let noisy = corrupt_labels(dataset, prob, seed).map_err(|e| TrainError::Config(e.to_string()))?;
    let config = TrainConfig { seed, ..config.clone() };
    let (ck, _) = train(&config, &noisy)?;
    let report = edit_trained_model(&ck.model, &noisy, seed)?;
    Ok((ck, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub prototypes: usize,
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    /// Task accuracy with every concept set to ground truth.
    pub intervened_task_accuracy: f64,
    pub swapped: usize,
}

pub fn prototype_count_sweep(
    config: &TrainConfig,
    dataset: &GlyphSum,
    counts: &[usize],
) -> Result<Vec<SweepPoint>, TrainError> {
    let mut out = Vec::with_capacity(counts.len());
    for &m in counts {
        if m < 2 {
            return Err(TrainError::Config(format!("sweep needs m >= 2, got {m}")));
        }
        let mut cfg = config.clone();
        cfg.model.prototypes = m;
        let (ck, _) = train(&cfg, dataset)?;
        let r = evaluate(&ck.model, &dataset.test, cfg.seed, &dataset.fingerprint())?;
        out.push(SweepPoint {
            prototypes: m,
            concept_accuracy: r.concept_accuracy,
            task_accuracy: r.task_accuracy,
            intervened_task_accuracy: ground_truth_task_accuracy(&ck.model, &dataset.test)?,
            swapped: ck.model.bank.entries.iter().filter(|e| e.status == Status::Swapped).count(),
        });
    }
    Ok(out)
}
