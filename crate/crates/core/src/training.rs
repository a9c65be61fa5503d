//! ELBO training: seeded mini-batching, warmup/cosine AdamW, randint task
//! inputs and the mid-training prototype swap.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ModelCheckpoint;
use crate::container::Container;
use crate::data::{GlyphSum, GlyphSumInstance, Split, NUM_DIGITS};
use crate::eval::evaluate;
use crate::model::{Batch, ModelConfig, ModelError, PartSource, Pgcm, Status, TaskSource};
use crate::tensor::{lr_at, adamw_step, AdamWConfig, Graph, LrSchedule, OptimizerState, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptySplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskInputMode {
    /// Detached predicted hard concepts with random ground-truth substitution.
    RandInt,
    /// Observed concept labels, as in the plain ELBO.
    Observed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_epochs: usize,
    /// Epoch at whose start learned prototypes are swapped for training parts.
    pub swap_epoch: Option<usize>,
    pub randint_prob: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub optimizer: AdamWConfig,
    pub task_input: TaskInputMode,
    /// Initial KL weight, decayed geometrically to `model.lambda_kl` over
    /// `kl_anneal_epochs`. `None` keeps the weight fixed.
    pub kl_start: Option<f64>,
    pub kl_anneal_epochs: usize,
    /// Autoencoder epochs for `f_enc`/`f_image` before the ELBO loop; when
    /// positive, learned embeddings start at encoded training parts, one
    /// concept label after another. Zero keeps the random initialisation.
    pub warm_start_epochs: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(60)
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            seed: 1,
            warmup_epochs: 10.min(epochs.saturating_sub(1)),
            swap_epoch: Some(epochs / 2),
            randint_prob: 0.2,
            base_lr: 3e-3,
            min_lr: 1e-5,
            optimizer: AdamWConfig::default(),
            task_input: TaskInputMode::RandInt,
            kl_start: None,
            kl_anneal_epochs: 0,
            warm_start_epochs: 0,
            model: ModelConfig::default(),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            min_lr: self.min_lr,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if let Some(s) = self.swap_epoch {
            if s == 0 || s >= self.epochs {
                return bad(format!("swap epoch {s} must lie strictly inside 0..{}", self.epochs));
            }
        }
        if !(0.0..=1.0).contains(&self.randint_prob) {
            return bad(format!("randint probability {}", self.randint_prob));
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup must be shorter than training".into());
        }
        if let Some(k) = self.kl_start {
            if !(k > 0.0 && k.is_finite()) || self.model.lambda_kl <= 0.0 {
                return bad(format!("KL annealing needs positive weights, got {k} -> {}", self.model.lambda_kl));
            }
        }
        self.model.validate()?;
        Ok(())
    }

    /// KL weight in effect during `epoch`.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        let target = self.model.lambda_kl;
        match self.kl_start {
            Some(start) if epoch < self.kl_anneal_epochs => {
                start * (target / start).powf(epoch as f64 / self.kl_anneal_epochs as f64)
            }
            _ => target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Per-instance means of the loss terms over the epoch.
    pub loss: f64,
    pub regularization: f64,
    pub task: f64,
    pub concept: f64,
    pub reconstruction: f64,
    pub val_concept_accuracy: f64,
    pub val_task_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapEntry {
    pub prototype: usize,
    pub part_id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapRecord {
    pub epoch: usize,
    pub entries: Vec<SwapEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub swap: Option<SwapRecord>,
    pub best_epoch: usize,
    pub seed: u64,
}

impl TrainReport {
    /// One line per epoch, then the swap record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&format!(
                "epoch={} lr={:.6e} loss={:.6} kl={:.6} task={:.6} concept={:.6} recon={:.6} val_concept_acc={:.4} val_task_acc={:.4}\n",
                e.epoch, e.lr, e.loss, e.regularization, e.task, e.concept, e.reconstruction, e.val_concept_accuracy, e.val_task_accuracy
            ));
        }
        if let Some(swap) = &self.swap {
            for w in &swap.entries {
                s.push_str(&format!("swap epoch={} prototype={} part_id={} score={:.6}\n", swap.epoch, w.prototype, w.part_id, w.score));
            }
        }
        s.push_str(&format!("best_epoch={} seed={}\n", self.best_epoch, self.seed));
        s
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("PGCM-TRAIN-REPORT", 1);
        c.set("seed", self.seed);
        c.set("best_epoch", self.best_epoch);
        c.set("epochs", self.epochs.len());
        let cols: [(&str, fn(&EpochRecord) -> f64); 8] = [
            ("lr", |e| e.lr),
            ("loss", |e| e.loss),
            ("regularization", |e| e.regularization),
            ("task", |e| e.task),
            ("concept", |e| e.concept),
            ("reconstruction", |e| e.reconstruction),
            ("val_concept_accuracy", |e| e.val_concept_accuracy),
            ("val_task_accuracy", |e| e.val_task_accuracy),
        ];
        for (name, f) in cols {
            let v: Vec<f32> = self.epochs.iter().map(|e| f(e) as f32).collect();
            if !v.is_empty() {
                c.add_f32(&format!("epoch.{name}"), &[v.len()], &v);
            }
        }
        if let Some(swap) = &self.swap {
            c.set("swap_epoch", swap.epoch);
            for w in &swap.entries {
                c.set(&format!("swap.{}", w.prototype), format!("{};{}", w.part_id, w.score));
            }
        }
        c
    }
}

/// `w_l = negatives_l / max(1, positives_l)` over every part of the split.
pub fn positive_class_weights(split: &Split) -> Vec<f64> {
    let mut pos = [0usize; NUM_DIGITS];
    let mut total = 0usize;
    for part in split.parts() {
        pos[part.label as usize] += 1;
        total += 1;
    }
    pos.iter().map(|&p| (total - p) as f64 / p.max(1) as f64).collect()
}

/// Each bit independently takes its ground-truth value with probability
/// `prob`, otherwise the predicted value.
pub fn randint_task_input(predicted: &[bool], truth: &[bool], prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    assert_eq!(predicted.len(), truth.len(), "randint inputs must align");
    predicted.iter().zip(truth).map(|(&p, &t)| if rng.gen_bool(prob) { t } else { p }).collect()
}

/// Flattened parts `[B * n, D]` for the given instances.
pub fn part_matrix<T: Real>(instances: &[&GlyphSumInstance]) -> Tensor<T> {
    let dim = instances[0].parts[0].pixels.len();
    let data: Vec<T> = instances
        .iter()
        .flat_map(|inst| inst.parts.iter())
        .flat_map(|p| p.pixels.iter().map(|&v| T::lit(v as f64)))
        .collect();
    Tensor::new(vec![data.len() / dim, dim], data).expect("part matrix")
}

pub fn make_batch<T: Real>(instances: &[&GlyphSumInstance]) -> Batch<T> {
    let parts = part_matrix(instances);
    let mut concepts = Vec::with_capacity(instances.len() * 2 * NUM_DIGITS);
    for inst in instances {
        for p in &inst.parts {
            concepts.extend(p.concepts().iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
    }
    let rows = concepts.len() / NUM_DIGITS;
    Batch {
        parts,
        concepts: Tensor::new(vec![rows, NUM_DIGITS], concepts).expect("concept matrix"),
        task: instances.iter().map(|i| i.task_label as usize).collect(),
    }
}

/// Trains `f_enc`/`f_image` as an autoencoder on training parts, then places
/// each learned embedding at `f_enc` of a training part. Prototype `j` draws
/// its part among those labelled with concept `j mod k`.
pub fn warm_start(model: &mut Pgcm<f32>, train: &Split, config: &TrainConfig) -> Result<(), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x94D0_49BB_1331_11EB) ^ 0x5753);
    let all: Vec<(&GlyphSumInstance, usize)> =
        train.instances.iter().flat_map(|i| (0..i.parts.len()).map(move |p| (i, p))).collect();
    let enc_n = model.encoder.num_tensors();
    let n_params = enc_n + model.image_decoder.num_tensors();
    let (names, mut params): (Vec<String>, Vec<Tensor<f32>>) =
        model.parameters().into_iter().take(n_params).unzip();
    let mut state = OptimizerState::for_params(&params.iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..all.len()).collect();
    let rows = config.batch_size * 2;
    for _ in 0..config.warm_start_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(rows) {
            let dim = all[0].0.parts[0].pixels.len();
            let data: Vec<f32> = idx.iter().flat_map(|&i| all[i].0.parts[all[i].1].pixels.iter().copied()).collect();
            let x = Tensor::new(vec![idx.len(), dim], data)?;
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let xv = g.constant(x);
            let z = model.encoder.forward_graph(&mut g, &vars[..enc_n], xv)?;
            let logits = model.image_decoder.forward_graph(&mut g, &vars[enc_n..], z)?;
            let recon = g.sigmoid(logits);
            let err = g.sq_diff(recon, xv)?;
            let total = g.sum(err);
            let loss = g.scale(total, 1.0 / idx.len() as f32);
            if !g.value(loss).data()[0].is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
            let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            adamw_step(&mut refs, &names, &grads, &mut state, &config.optimizer, config.base_lr)?;
        }
    }
    let mut full: Vec<Tensor<f32>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    full[..n_params].clone_from_slice(&params);
    model.set_parameters(&full)?;

    let k = model.config.concepts;
    let by_label: Vec<Vec<usize>> = (0..k)
        .map(|l| (0..all.len()).filter(|&i| all[i].0.parts[all[i].1].concepts()[l]).collect())
        .collect();
    for (slot, j) in model.bank.learned_active().into_iter().enumerate() {
        let pool = &by_label[slot % k];
        let pick = if pool.is_empty() { rng.gen_range(0..all.len()) } else { pool[rng.gen_range(0..pool.len())] };
        let (inst, p) = all[pick];
        let z = model.encode_part(&inst.parts[p].pixels)?;
        model.bank.entries[j].embedding = Some(z);
    }
    Ok(())
}

/// Replaces every learned prototype by the training part with the highest
/// `<f_enc(part), e'_j>`; ties go to the lowest part id. Embeddings are
/// dropped and the chosen images are frozen.
pub fn swap_prototypes<T: Real>(model: &mut Pgcm<T>, train: &Split, epoch: usize) -> Result<SwapRecord, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let learned = model.bank.learned_active();
    let view = model.prototype_view()?;
    let mut best: Vec<Option<(u64, T, usize, usize)>> = vec![None; learned.len()];
    let targets: Vec<Vec<T>> = learned
        .iter()
        .map(|&j| view.embeddings.row(view.position(j).expect("active")).to_vec())
        .collect();
    let target = Tensor::stack_rows(&targets.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;

    const CHUNK: usize = 512;
    for (c, chunk) in train.instances.chunks(CHUNK).enumerate() {
        let refs: Vec<&GlyphSumInstance> = chunk.iter().collect();
        let z = model.encode(&part_matrix(&refs))?;
        let scores = z.matmul(&target, true)?;
        for (r, inst_part) in chunk.iter().flat_map(|i| (0..2).map(move |p| (i, p))).enumerate() {
            let (inst, p) = inst_part;
            let part_id = inst.part_id(p);
            for (slot, &s) in best.iter_mut().zip(scores.row(r)) {
                let better = match slot {
                    None => true,
                    Some((id, sc, _, _)) => s > *sc || (s == *sc && part_id < *id),
                };
                if better {
                    *slot = Some((part_id, s, c * CHUNK + r / 2, p));
                }
            }
        }
    }

    let mut entries = Vec::with_capacity(learned.len());
    for (&j, slot) in learned.iter().zip(best) {
        let (part_id, score, inst_idx, p) = slot.expect("non-empty split");
        let part = &train.instances[inst_idx].parts[p];
        let e = &mut model.bank.entries[j];
        e.stored_image = Some(part.pixels.iter().map(|&v| T::lit(v as f64)).collect());
        e.embedding = None;
        e.status = Status::Swapped;
        e.source = Some(PartSource { part_id, digit: part.digit });
        entries.push(SwapEntry { prototype: j, part_id, score: score.to_f64().unwrap_or(f64::NAN) });
    }
    Ok(SwapRecord { epoch, entries })
}

/// Model config for GlyphSum with class weights taken from `dataset`'s
/// training split.
pub fn glyphsum_model_config(base: &ModelConfig, dataset: &GlyphSum) -> ModelConfig {
    ModelConfig {
        concepts: NUM_DIGITS,
        parts: 2,
        channels: 3,
        height: dataset.config.size,
        width: dataset.config.size,
        task_classes: crate::data::NUM_SUMS,
        pos_weights: positive_class_weights(&dataset.train),
        ..base.clone()
    }
}

pub fn train(config: &TrainConfig, dataset: &GlyphSum) -> Result<(ModelCheckpoint, TrainReport), TrainError> {
    train_observed(config, dataset, &mut |_, _| {})
}

/// As [`train`], calling `observer` after every epoch with the epoch record
/// and the current (not necessarily best) model.
pub fn train_observed(
    config: &TrainConfig,
    dataset: &GlyphSum,
    observer: &mut dyn FnMut(&EpochRecord, &Pgcm<f32>),
) -> Result<(ModelCheckpoint, TrainReport), TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let model_config = glyphsum_model_config(&config.model, dataset);
    let mut model = Pgcm::<f32>::new(model_config, config.seed)?;
    let schedule = config.schedule();
    if config.warm_start_epochs > 0 {
        warm_start(&mut model, &dataset.train, config)?;
    }

    let (mut names, mut params): (Vec<String>, Vec<Tensor<f32>>) = model.parameters().into_iter().unzip();
    let mut state = OptimizerState::for_params(&params.iter().collect::<Vec<_>>());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5348);
    let mut randint_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ 0x5249);

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut swap_record = None;
    let mut best: Option<(f64, usize, Pgcm<f32>)> = None;

    for epoch in 0..config.epochs {
        if Some(epoch) == config.swap_epoch {
            model.set_parameters(&params)?;
            swap_record = Some(swap_prototypes(&mut model, &dataset.train, epoch)?);
            // embedding tensors sit after the network tensors and are gone now
            let (n, p): (Vec<String>, Vec<Tensor<f32>>) = model.parameters().into_iter().unzip();
            state.first.truncate(p.len());
            state.second.truncate(p.len());
            names = n;
            params = p;
        }
        let lr = lr_at(epoch, &schedule)?;
        model.config.lambda_kl = config.kl_weight(epoch);
        order.shuffle(&mut shuffle_rng);

        let mut sums = [0.0f64; 5];
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let instances: Vec<&GlyphSumInstance> = idx.iter().map(|&i| &dataset.train.instances[i]).collect();
            let batch = make_batch::<f32>(&instances);
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let source = match config.task_input {
                TaskInputMode::RandInt => TaskSource::RandInt { prob: config.randint_prob, rng: &mut randint_rng },
                TaskInputMode::Observed => TaskSource::Observed,
            };
            let ev = model.elbo_graph(&mut g, &vars, &batch, source, None)?;
            let terms = ev.terms(&g);
            if !terms.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            for (acc, v) in sums.iter_mut().zip([terms.total, terms.regularization, terms.task, terms.concept, terms.reconstruction]) {
                *acc += v as f64;
            }
            let loss = g.scale(ev.total, 1.0 / instances.len() as f32);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
            let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            adamw_step(&mut refs, &names, &grads, &mut state, &config.optimizer, lr)?;
        }
        model.set_parameters(&params)?;

        let n = dataset.train.len() as f64;
        let val = evaluate(&model, &dataset.val, config.seed, "")?;
        records.push(EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            regularization: sums[1] / n,
            task: sums[2] / n,
            concept: sums[3] / n,
            reconstruction: sums[4] / n,
            val_concept_accuracy: val.concept_accuracy,
            val_task_accuracy: val.task_accuracy,
        });

        observer(records.last().expect("pushed above"), &model);
        let eligible = config.swap_epoch.is_none_or(|s| epoch >= s);
        if eligible && best.as_ref().is_none_or(|(acc, _, _)| val.task_accuracy > *acc) {
            best = Some((val.task_accuracy, epoch, model.clone()));
        }
    }

    let (_, best_epoch, mut best_model) = best.expect("at least one eligible epoch");
    best_model.config.lambda_kl = config.model.lambda_kl;
    let report = TrainReport { epochs: records, swap: swap_record, best_epoch, seed: config.seed };
    let mut checkpoint = ModelCheckpoint::new(best_model, config.seed, best_epoch);
    checkpoint.dataset_fingerprint = dataset.fingerprint();
    let best_rec = &report.epochs[best_epoch];
    checkpoint.metrics.push(("val_concept_accuracy".into(), format!("{:.6}", best_rec.val_concept_accuracy)));
    checkpoint.metrics.push(("val_task_accuracy".into(), format!("{:.6}", best_rec.val_task_accuracy)));
    Ok((checkpoint, report))
}
