//! Concept bottleneck baseline: an MLP concept predictor with the same layer
//! sizes as the PGCM concept path, and an MLP task head on hard concepts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::data::{GlyphSum, GlyphSumInstance, Split, NUM_DIGITS, NUM_SUMS};
use crate::model::{Mlp, ModelError, HARD_THRESHOLD};
use crate::tensor::{adamw_step, lr_at, Graph, OptimizerState, Tensor, Var};
use crate::training::{make_batch, part_matrix, positive_class_weights, randint_task_input, TaskInputMode, TrainConfig, TrainError};

use super::{report_from_predictions, MetricsReport, EVAL_CHUNK};

#[derive(Clone, Debug, PartialEq)]
pub struct Cbm {
    /// `D -> encoder_hidden -> embed_dim -> concept_hidden -> k`, logits.
    pub concept_net: Mlp<f32>,
    /// `n * k -> task_hidden -> classes`, logits.
    pub task_head: Mlp<f32>,
    pub parts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbmReport {
    pub best_epoch: usize,
    pub val_task_accuracy: f64,
    pub test: MetricsReport,
}

impl Cbm {
    pub fn new(config: &TrainConfig, part_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = &config.model;
        Self {
            concept_net: Mlp::new(&[part_dim, m.encoder_hidden, m.embed_dim, m.concept_hidden, m.concepts], &mut rng),
            task_head: Mlp::new(&[m.parts * m.concepts, m.task_hidden, m.task_classes], &mut rng),
            parts: m.parts,
        }
    }

    fn parameters(&self) -> Vec<Tensor<f32>> {
        [&self.concept_net, &self.task_head]
            .iter()
            .flat_map(|net| net.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]))
            .collect()
    }

    fn set_parameters(&mut self, params: &[Tensor<f32>]) {
        let mut it = params.iter().cloned();
        for net in [&mut self.concept_net, &mut self.task_head] {
            for layer in &mut net.layers {
                layer.weight = it.next().expect("weight");
                layer.bias = it.next().expect("bias");
            }
        }
    }

    /// Concept probabilities `[P, k]` for parts `[P, D]`.
    pub fn predict_concepts(&self, parts: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        Ok(self.concept_net.forward(parts)?.sigmoid())
    }

    /// Hard concepts `[B * n, k]` and task classes for whole instances.
    pub fn predict(&self, instances: &[&GlyphSumInstance]) -> Result<(Vec<bool>, Vec<usize>), ModelError> {
        let probs = self.predict_concepts(&part_matrix(instances))?;
        let hard: Vec<bool> = probs.data().iter().map(|&p| p as f64 > HARD_THRESHOLD).collect();
        let task = self.predict_task(&hard)?;
        Ok((hard, task))
    }

    pub fn predict_task(&self, hard: &[bool]) -> Result<Vec<usize>, ModelError> {
        let width = self.task_head.input_dim();
        let data = hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let input = Tensor::new(vec![hard.len() / width, width], data)?;
        Ok(self.task_head.forward(&input)?.argmax_rows())
    }

    pub fn evaluate(&self, split: &Split, seed: u64, fingerprint: &str) -> Result<MetricsReport, ModelError> {
        let (mut hard, mut task) = (Vec::new(), Vec::new());
        for chunk in split.instances.chunks(EVAL_CHUNK) {
            let refs: Vec<_> = chunk.iter().collect();
            let (h, t) = self.predict(&refs)?;
            hard.extend(h);
            task.extend(t);
        }
        Ok(report_from_predictions(&hard, &task, split, self.task_head.output_dim(), seed, fingerprint))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("PGCM-CBM", 1);
        c.set("parts", self.parts);
        for (name, net) in [("concept_net", &self.concept_net), ("task_head", &self.task_head)] {
            c.set(&format!("layers.{name}"), net.layers.len());
            for (i, l) in net.layers.iter().enumerate() {
                c.add_f32(&format!("{name}.{i}.weight"), l.weight.shape(), l.weight.data());
                c.add_f32(&format!("{name}.{i}.bias"), l.bias.shape(), l.bias.data());
            }
        }
        c
    }
}

/// Trains the baseline with weighted BCE on concepts and cross-entropy on the
/// task, using the same schedule, batching and randint rule as PGCM.
pub fn train_cbm_baseline(config: &TrainConfig, dataset: &GlyphSum) -> Result<(Cbm, CbmReport), TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let part_dim = dataset.config.part_dim();
    let k = NUM_DIGITS;
    let mut model_cfg = config.model.clone();
    model_cfg.concepts = k;
    model_cfg.task_classes = NUM_SUMS;
    let config = TrainConfig { model: model_cfg, ..config.clone() };
    let mut cbm = Cbm::new(&config, part_dim);
    let weights = positive_class_weights(&dataset.train);
    let schedule = config.schedule();

    let mut params = cbm.parameters();
    let names: Vec<String> = (0..params.len()).map(|i| format!("cbm.{i}")).collect();
    let n_concept = cbm.concept_net.num_tensors();
    let mut state = OptimizerState::for_params(&params.iter().collect::<Vec<_>>());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x4342);
    let mut randint_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ 0x4352);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut best: Option<(f64, usize, Cbm)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, &schedule)?;
        order.shuffle(&mut shuffle_rng);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let instances: Vec<&GlyphSumInstance> = idx.iter().map(|&i| &dataset.train.instances[i]).collect();
            let batch = make_batch::<f32>(&instances);
            let b = instances.len();
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();

            let x = g.constant(batch.parts.clone());
            let logits = cbm.concept_net.forward_graph(&mut g, &vars[..n_concept], x)?;
            let mut pos = batch.concepts.clone();
            for r in 0..pos.dims2().0 {
                for (l, v) in pos.row_mut(r).iter_mut().enumerate() {
                    *v *= weights[l] as f32;
                }
            }
            let neg = batch.concepts.map(|c| 1.0 - c);
            let neg_logits = g.scale(logits, -1.0);
            let sp_neg = g.softplus(neg_logits);
            let sp_pos = g.softplus(logits);
            let pos = g.constant(pos);
            let neg = g.constant(neg);
            let a = g.mul(sp_neg, pos)?;
            let c = g.mul(sp_pos, neg)?;
            let bce = g.add(a, c)?;
            let concept_loss = g.sum(bce);

            let truth: Vec<bool> = batch.concepts.data().iter().map(|&c| c > 0.5).collect();
            let predicted: Vec<bool> = g.value(logits).data().iter().map(|&z| z > 0.0).collect();
            let input = match config.task_input {
                TaskInputMode::RandInt => randint_task_input(&predicted, &truth, config.randint_prob, &mut randint_rng),
                TaskInputMode::Observed => truth,
            };
            let input = Tensor::new(vec![b, cbm.parts * k], input.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
            let t_in = g.constant(input);
            let task_logits = cbm.task_head.forward_graph(&mut g, &vars[n_concept..], t_in)?;
            let log_probs = g.log_softmax(task_logits)?;
            let picked = g.gather(log_probs, &batch.task)?;
            let task_ll = g.sum(picked);
            let task_loss = g.scale(task_ll, -1.0);

            let total = g.add(concept_loss, task_loss)?;
            if !g.value(total).item().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            let loss = g.scale(total, 1.0 / b as f32);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
            let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            adamw_step(&mut refs, &names, &grads, &mut state, &config.optimizer, lr)?;
        }
        cbm.set_parameters(&params);
        let val = cbm.evaluate(&dataset.val, config.seed, "")?;
        if best.as_ref().is_none_or(|(acc, _, _)| val.task_accuracy > *acc) {
            best = Some((val.task_accuracy, epoch, cbm.clone()));
        }
    }
    let (val_task_accuracy, best_epoch, cbm) = best.expect("at least one epoch");
    let test = cbm.evaluate(&dataset.test, config.seed, &dataset.fingerprint())?;
    Ok((cbm, CbmReport { best_epoch, val_task_accuracy, test }))
}
