//! The prototype-grounded concept model.
//!
//! Image parts are encoded, matched against the prototype bank by dot product,
//! and inherit concept probabilities as a selector-weighted mixture of the
//! prototypes' concept vectors. Prototype embeddings never feed the selector
//! or the concept decoder directly: each prototype is first rendered to an
//! image (decoded or stored) and re-encoded.

mod bank;
mod elbo;
mod mlp;
mod table;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor, TensorError};

pub use bank::{PartSource, PrototypeBank, PrototypeEntry, Status};
pub use elbo::{Batch, ElboTerms, ElboVars, TaskSource};
pub use mlp::{Linear, Mlp};
pub use table::{AlignmentRow, ConceptAlignmentTable};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no active prototypes left")]
    NoActivePrototypes,
    #[error("prototype {0} has been removed")]
    RemovedPrototype(usize),
    #[error("prototype {0} does not exist")]
    UnknownPrototype(usize),
    #[error("cannot remove prototype {0}: it is the last active one")]
    LastPrototype(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Hard concepts always use the Bernoulli mode.
pub const HARD_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of prototypes `m`.
    pub prototypes: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    /// Concepts per part `k`.
    pub concepts: usize,
    /// Parts per instance `n`.
    pub parts: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub task_classes: usize,
    /// Fixed variance of the Gaussian image likelihood.
    pub sigma2: f64,
    /// Threshold for the alignment table's active concepts.
    pub tau: f64,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub concept_hidden: usize,
    pub task_hidden: usize,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    /// Weight applied to positive targets in the concept likelihood.
    pub pos_weights: Vec<f64>,
    /// Standard deviation of the initial prototype embeddings.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prototypes: 30,
            embed_dim: 32,
            concepts: 10,
            parts: 2,
            channels: 3,
            height: 16,
            width: 16,
            task_classes: 19,
            sigma2: 0.5,
            tau: 0.5,
            encoder_hidden: 128,
            decoder_hidden: 128,
            concept_hidden: 64,
            task_hidden: 64,
            lambda_rec: 0.001,
            lambda_kl: 0.1,
            pos_weights: vec![1.0; 10],
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Pixels per part, `D`.
    pub fn part_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.prototypes < 2 {
            return bad(format!("need at least 2 prototypes, got {}", self.prototypes));
        }
        if self.sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.pos_weights.len() != self.concepts {
            return bad(format!("{} positive weights for {} concepts", self.pos_weights.len(), self.concepts));
        }
        let sizes = [
            self.embed_dim,
            self.concepts,
            self.parts,
            self.part_dim(),
            self.task_classes,
            self.encoder_hidden,
            self.decoder_hidden,
            self.concept_hidden,
            self.task_hidden,
        ];
        if sizes.contains(&0) {
            return bad("all dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Prototype-side quantities for every active entry, in ascending index order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeView<T> {
    pub active: Vec<usize>,
    /// `[m_active, D]` image representations.
    pub images: Tensor<T>,
    /// `[m_active, d]` effective embeddings `f_enc(image)`.
    pub embeddings: Tensor<T>,
    /// `[m_active, k]` concept probabilities, overrides applied.
    pub concepts: Tensor<T>,
}

impl<T: Real> PrototypeView<T> {
    /// Position of bank index `j` among the active rows.
    pub fn position(&self, j: usize) -> Option<usize> {
        self.active.binary_search(&j).ok()
    }
}

/// Per-part inference output.
#[derive(Clone, Debug, PartialEq)]
pub struct PartPredictions<T> {
    pub active: Vec<usize>,
    /// `[P, m_active]` selector distribution.
    pub selector: Tensor<T>,
    /// `[P, m_active]` pre-softmax similarities.
    pub logits: Tensor<T>,
    /// `[P, k]` posterior predictive concept probabilities.
    pub concepts: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgcm<T> {
    pub config: ModelConfig,
    pub encoder: Mlp<T>,
    pub image_decoder: Mlp<T>,
    pub concept_decoder: Mlp<T>,
    pub task_head: Mlp<T>,
    pub bank: PrototypeBank<T>,
}

impl<T: Real> Pgcm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dim = config.part_dim();
        let encoder = Mlp::new(&[dim, config.encoder_hidden, d], &mut rng);
        let image_decoder = Mlp::new(&[d, config.decoder_hidden, dim], &mut rng);
        let concept_decoder = Mlp::new(&[d, config.concept_hidden, config.concepts], &mut rng);
        let task_head =
            Mlp::new(&[config.parts * config.concepts, config.task_hidden, config.task_classes], &mut rng);
        let entries = (0..config.prototypes)
            .map(|_| {
                let e: Vec<T> = (0..d).map(|_| { let s: f64 = StandardNormal.sample(&mut rng); T::lit(config.init_scale * s) }).collect();
                PrototypeEntry::learned(e)
            })
            .collect();
        Ok(Self { encoder, image_decoder, concept_decoder, task_head, bank: PrototypeBank { entries, dim: d }, config })
    }

    pub fn cast<U: Real>(&self) -> Pgcm<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect::<Vec<U>>();
        Pgcm {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            image_decoder: self.image_decoder.cast(),
            concept_decoder: self.concept_decoder.cast(),
            task_head: self.task_head.cast(),
            bank: PrototypeBank {
                dim: self.bank.dim,
                entries: self
                    .bank
                    .entries
                    .iter()
                    .map(|e| PrototypeEntry {
                        embedding: e.embedding.as_ref().map(cv),
                        stored_image: e.stored_image.as_ref().map(cv),
                        concept_override: e.concept_override.clone(),
                        status: e.status,
                        source: e.source,
                    })
                    .collect(),
            },
        }
    }

    fn check_part_rows(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c) = x.dims2();
        if x.shape().len() != 2 || c != self.config.part_dim() {
            return Err(ModelError::Shape(format!(
                "expected parts of {} pixels, got shape {:?}",
                self.config.part_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `f_enc` on a batch of flattened parts `[P, D]`.
    pub fn encode(&self, parts: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_part_rows(parts)?;
        Ok(self.encoder.forward(parts)?)
    }

    pub fn encode_part(&self, pixels: &[T]) -> Result<Vec<T>> {
        let x = Tensor::new(vec![1, pixels.len()], pixels.to_vec())?;
        Ok(self.encode(&x)?.into_data())
    }

    /// `mu = sigmoid(f_image(e))` for embeddings `[r, d]`.
    pub fn decode_images(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.image_decoder.forward(embeddings)?.sigmoid())
    }

    pub fn decode_prototype_image(&self, embedding: &[T]) -> Result<Vec<T>> {
        if embedding.len() != self.config.embed_dim {
            return Err(ModelError::Shape(format!("embedding of length {}", embedding.len())));
        }
        let e = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
        Ok(self.decode_images(&e)?.into_data())
    }

    /// Raw `sigmoid(f_concept(e'))` rows, before overrides.
    pub fn decode_prototype_concepts(&self, effective: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.concept_decoder.forward(effective)?.sigmoid())
    }

    /// Image representation of bank entry `j`.
    pub fn prototype_image(&self, j: usize) -> Result<Vec<T>> {
        let entry = self.bank.active_entry(j)?;
        match (&entry.stored_image, &entry.embedding) {
            (Some(img), _) => Ok(img.clone()),
            (None, Some(e)) => self.decode_prototype_image(e),
            (None, None) => Err(ModelError::Input(format!("prototype {j} has neither image nor embedding"))),
        }
    }

    /// `e'_j = f_enc(image_j)`.
    pub fn effective_embedding(&self, j: usize) -> Result<Vec<T>> {
        let img = self.prototype_image(j)?;
        self.encode_part(&img)
    }

    /// Images, effective embeddings and concept probabilities of all active
    /// prototypes, computed in one batch.
    pub fn prototype_view(&self) -> Result<PrototypeView<T>> {
        let active = self.bank.active();
        if active.is_empty() {
            return Err(ModelError::NoActivePrototypes);
        }
        let learned: Vec<usize> =
            active.iter().copied().filter(|&j| self.bank.entries[j].stored_image.is_none()).collect();
        let decoded = if learned.is_empty() {
            None
        } else {
            let rows: Vec<&[T]> = learned
                .iter()
                .map(|&j| {
                    self.bank.entries[j]
                        .embedding
                        .as_deref()
                        .ok_or_else(|| ModelError::Input(format!("prototype {j} has neither image nor embedding")))
                })
                .collect::<Result<_>>()?;
            Some(self.decode_images(&Tensor::stack_rows(&rows)?)?)
        };
        let rows: Vec<&[T]> = active
            .iter()
            .map(|&j| match &self.bank.entries[j].stored_image {
                Some(img) => img.as_slice(),
                None => {
                    let pos = learned.binary_search(&j).expect("learned entry");
                    decoded.as_ref().expect("decoded images").row(pos)
                }
            })
            .collect();
        let images = Tensor::stack_rows(&rows)?;
        let embeddings = self.encode(&images)?;
        let mut concepts = self.decode_prototype_concepts(&embeddings)?;
        for (pos, &j) in active.iter().enumerate() {
            if let Some(bits) = &self.bank.entries[j].concept_override {
                for (v, &b) in concepts.row_mut(pos).iter_mut().zip(bits) {
                    *v = if b { T::one() } else { T::zero() };
                }
            }
        }
        Ok(PrototypeView { active, images, embeddings, concepts })
    }

    /// Selector over the active prototypes: softmax of `<z, e'_j>`.
    pub fn select_prototypes(&self, z: &Tensor<T>, view: &PrototypeView<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let logits = z.matmul(&view.embeddings, true)?;
        let probs = logits.softmax_rows();
        Ok((logits, probs))
    }

    pub fn predict_parts_with(&self, view: &PrototypeView<T>, parts: &Tensor<T>) -> Result<PartPredictions<T>> {
        let z = self.encode(parts)?;
        let (logits, selector) = self.select_prototypes(&z, view)?;
        let concepts = selector.matmul(&view.concepts, false)?;
        Ok(PartPredictions { active: view.active.clone(), selector, logits, concepts })
    }

    /// Posterior predictive concepts `p(c_l | x) = sum_j q_j pi_{j,l}` for
    /// flattened parts `[P, D]`.
    pub fn predict_concepts(&self, parts: &Tensor<T>) -> Result<PartPredictions<T>> {
        let view = self.prototype_view()?;
        self.predict_parts_with(&view, parts)
    }

    /// Task distribution from hard concepts `[B, n * k]` with {0, 1} entries.
    pub fn predict_task(&self, hard: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c) = hard.dims2();
        let width = self.config.parts * self.config.concepts;
        if hard.shape().len() != 2 || c != width {
            return Err(ModelError::Shape(format!("task input must have {width} columns, got {:?}", hard.shape())));
        }
        if hard.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(ModelError::Input("task input must be hard {0, 1} concepts".into()));
        }
        Ok(self.task_head.forward(hard)?.softmax_rows())
    }

    /// Thresholds concept probabilities `[B * n, k]` and regroups them per
    /// instance as `[B, n * k]`.
    pub fn hard_task_input(&self, concepts: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, k) = concepts.dims2();
        let n = self.config.parts;
        if rows % n != 0 || k != self.config.concepts {
            return Err(ModelError::Shape(format!("concept matrix {:?}", concepts.shape())));
        }
        let hard = concepts.map(|p| if p > T::lit(HARD_THRESHOLD) { T::one() } else { T::zero() });
        Ok(hard.reshape(&[rows / n, n * k])?)
    }

    /// Full inference for flattened parts `[B * n, D]`.
    pub fn predict(&self, parts: &Tensor<T>) -> Result<(PartPredictions<T>, Tensor<T>)> {
        let pred = self.predict_concepts(parts)?;
        let task = self.predict_task(&self.hard_task_input(&pred.concepts)?)?;
        Ok((pred, task))
    }

    /// Parameter tensors in graph-binding order with their names. Learned
    /// embeddings follow the four networks, one `[1, d]` tensor per learned
    /// active entry.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, net) in self.networks() {
            for (i, layer) in net.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), layer.weight.clone()));
                out.push((format!("{name}.{i}.bias"), layer.bias.clone()));
            }
        }
        for j in self.bank.learned_active() {
            let e = self.bank.entries[j].embedding.clone().expect("learned embedding");
            out.push((format!("prototype.{j}.embedding"), Tensor::new(vec![1, e.len()], e).expect("embedding")));
        }
        out
    }

    /// Writes back tensors in [`Pgcm::parameters`] order.
    pub fn set_parameters(&mut self, params: &[Tensor<T>]) -> Result<()> {
        let mut it = params.iter();
        let mut next = |shape: &[usize]| -> Result<Tensor<T>> {
            let t = it.next().ok_or_else(|| ModelError::Shape("too few parameters".into()))?;
            if t.shape() != shape {
                return Err(ModelError::Shape(format!("parameter shape {:?} != {:?}", t.shape(), shape)));
            }
            Ok(t.clone())
        };
        for net in [&mut self.encoder, &mut self.image_decoder, &mut self.concept_decoder, &mut self.task_head] {
            for layer in &mut net.layers {
                let w = next(layer.weight.shape())?;
                let b = next(layer.bias.shape())?;
                layer.weight = w;
                layer.bias = b;
            }
        }
        let d = self.config.embed_dim;
        for j in self.bank.learned_active() {
            self.bank.entries[j].embedding = Some(next(&[1, d])?.into_data());
        }
        Ok(())
    }

    pub(crate) fn networks(&self) -> [(&'static str, &Mlp<T>); 4] {
        [
            ("encoder", &self.encoder),
            ("image_decoder", &self.image_decoder),
            ("concept_decoder", &self.concept_decoder),
            ("task_head", &self.task_head),
        ]
    }
}
