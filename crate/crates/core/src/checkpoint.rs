//! Model checkpoints: manifest (config, statuses, overrides, metrics) plus a
//! little-endian f32 blob of every tensor and stored image.

use std::path::Path;

use crate::container::{Container, FormatError};
use crate::model::{Linear, ModelConfig, ModelError, Mlp, PartSource, Pgcm, PrototypeBank, PrototypeEntry, Status};
use crate::tensor::Tensor;

pub const MAGIC: &str = "PGCM-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("shape mismatch for {name}: stored {stored:?}, expected {expected:?}")]
    Shape { name: String, stored: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Pgcm<f32>,
    pub seed: u64,
    pub epoch: usize,
    /// Metric snapshot, written in order.
    pub metrics: Vec<(String, String)>,
    pub dataset_fingerprint: String,
}

fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn bits_from_str(s: &str, k: usize) -> Result<Vec<bool>, FormatError> {
    if s.len() != k || !s.bytes().all(|b| b == b'0' || b == b'1') {
        return Err(FormatError::Malformed(format!("override bits {s:?}")));
    }
    Ok(s.bytes().map(|b| b == b'1').collect())
}

pub fn config_entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("prototypes", cfg.prototypes.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("concepts", cfg.concepts.to_string()),
        ("parts", cfg.parts.to_string()),
        ("channels", cfg.channels.to_string()),
        ("height", cfg.height.to_string()),
        ("width", cfg.width.to_string()),
        ("task_classes", cfg.task_classes.to_string()),
        ("sigma2", format!("{:?}", cfg.sigma2)),
        ("tau", format!("{:?}", cfg.tau)),
        ("encoder_hidden", cfg.encoder_hidden.to_string()),
        ("decoder_hidden", cfg.decoder_hidden.to_string()),
        ("concept_hidden", cfg.concept_hidden.to_string()),
        ("task_hidden", cfg.task_hidden.to_string()),
        ("lambda_rec", format!("{:?}", cfg.lambda_rec)),
        ("lambda_kl", format!("{:?}", cfg.lambda_kl)),
        ("init_scale", format!("{:?}", cfg.init_scale)),
        ("pos_weights", cfg.pos_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(",")),
    ]
}

fn read_config(c: &Container) -> Result<ModelConfig, FormatError> {
    let weights = c.require("config.pos_weights")?;
    let pos_weights = weights
        .split(',')
        .map(|w| w.parse::<f64>().map_err(|_| FormatError::Malformed(format!("pos weight {w:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelConfig {
        prototypes: c.parse_key("config.prototypes")?,
        embed_dim: c.parse_key("config.embed_dim")?,
        concepts: c.parse_key("config.concepts")?,
        parts: c.parse_key("config.parts")?,
        channels: c.parse_key("config.channels")?,
        height: c.parse_key("config.height")?,
        width: c.parse_key("config.width")?,
        task_classes: c.parse_key("config.task_classes")?,
        sigma2: c.parse_key("config.sigma2")?,
        tau: c.parse_key("config.tau")?,
        encoder_hidden: c.parse_key("config.encoder_hidden")?,
        decoder_hidden: c.parse_key("config.decoder_hidden")?,
        concept_hidden: c.parse_key("config.concept_hidden")?,
        task_hidden: c.parse_key("config.task_hidden")?,
        lambda_rec: c.parse_key("config.lambda_rec")?,
        lambda_kl: c.parse_key("config.lambda_kl")?,
        pos_weights,
        init_scale: c.parse_key("config.init_scale")?,
    })
}

impl ModelCheckpoint {
    pub fn new(model: Pgcm<f32>, seed: u64, epoch: usize) -> Self {
        Self { model, seed, epoch, metrics: Vec::new(), dataset_fingerprint: String::new() }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(MAGIC, VERSION);
        let model = &self.model;
        for (k, v) in config_entries(&model.config) {
            c.set(&format!("config.{k}"), v);
        }
        c.set("seed", self.seed);
        c.set("epoch", self.epoch);
        c.set("dataset_fingerprint", &self.dataset_fingerprint);
        c.set("metrics", self.metrics.len());
        for (i, (k, v)) in self.metrics.iter().enumerate() {
            c.set(&format!("metric.{i}"), format!("{k}={v}"));
        }
        for (name, net) in model.networks() {
            c.set(&format!("layers.{name}"), net.layers.len());
            for (i, layer) in net.layers.iter().enumerate() {
                c.add_f32(&format!("{name}.{i}.weight"), layer.weight.shape(), layer.weight.data());
                c.add_f32(&format!("{name}.{i}.bias"), layer.bias.shape(), layer.bias.data());
            }
        }
        c.set("bank.len", model.bank.len());
        for (j, e) in model.bank.entries.iter().enumerate() {
            c.set(&format!("bank.{j}.status"), e.status.as_str());
            if let Some(bits) = &e.concept_override {
                c.set(&format!("bank.{j}.override"), bits_to_string(bits));
            }
            if let Some(src) = e.source {
                c.set(&format!("bank.{j}.source"), format!("{};{}", src.part_id, src.digit));
            }
            if let Some(emb) = &e.embedding {
                c.add_f32(&format!("bank.{j}.embedding"), &[emb.len()], emb);
            }
            if let Some(img) = &e.stored_image {
                c.add_f32(&format!("bank.{j}.image"), &[img.len()], img);
            }
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::from_container(&Container::from_bytes(bytes, MAGIC, VERSION)?)
    }

    pub fn from_container(c: &Container) -> Result<Self, CheckpointError> {
        let config = read_config(c)?;
        config.validate()?;
        // a freshly initialized model supplies the expected layer shapes
        let template = Pgcm::<f32>::new(config.clone(), 0)?;
        let mut nets = Vec::with_capacity(4);
        for (name, net) in template.networks() {
            let layers: usize = c.parse_key(&format!("layers.{name}"))?;
            if layers != net.layers.len() {
                return Err(CheckpointError::Shape {
                    name: format!("{name} layers"),
                    stored: vec![layers],
                    expected: vec![net.layers.len()],
                });
            }
            let mut out = Vec::with_capacity(layers);
            for (i, layer) in net.layers.iter().enumerate() {
                let weight = read_tensor(c, &format!("{name}.{i}.weight"), layer.weight.shape())?;
                let bias = read_tensor(c, &format!("{name}.{i}.bias"), layer.bias.shape())?;
                out.push(Linear { weight, bias });
            }
            nets.push(Mlp { layers: out });
        }
        let task_head = nets.pop().expect("four networks");
        let concept_decoder = nets.pop().expect("four networks");
        let image_decoder = nets.pop().expect("four networks");
        let encoder = nets.pop().expect("four networks");

        let len: usize = c.parse_key("bank.len")?;
        let mut entries = Vec::with_capacity(len);
        for j in 0..len {
            let status_key = format!("bank.{j}.status");
            let status = Status::parse(c.require(&status_key)?)
                .ok_or_else(|| FormatError::Malformed(status_key.to_string()))?;
            let concept_override = c.get(&format!("bank.{j}.override")).map(|s| bits_from_str(s, config.concepts)).transpose()?;
            let source = match c.get(&format!("bank.{j}.source")) {
                None => None,
                Some(s) => {
                    let (id, digit) = s.split_once(';').ok_or_else(|| FormatError::Malformed(format!("source {s:?}")))?;
                    Some(PartSource {
                        part_id: id.parse().map_err(|_| FormatError::Malformed(format!("source {s:?}")))?,
                        digit: digit.parse().map_err(|_| FormatError::Malformed(format!("source {s:?}")))?,
                    })
                }
            };
            let optional = |suffix: &str, size: usize| -> Result<Option<Vec<f32>>, CheckpointError> {
                let name = format!("bank.{j}.{suffix}");
                if !c.has_array(&name) {
                    return Ok(None);
                }
                Ok(Some(read_tensor(c, &name, &[size])?.into_data()))
            };
            let embedding = optional("embedding", config.embed_dim)?;
            let stored_image = optional("image", config.part_dim())?;
            if embedding.is_none() && stored_image.is_none() {
                return Err(FormatError::Missing(format!("bank.{j} image or embedding")).into());
            }
            entries.push(PrototypeEntry { embedding, stored_image, concept_override, status, source });
        }
        let n_metrics: usize = c.parse_key("metrics")?;
        let mut metrics = Vec::with_capacity(n_metrics);
        for i in 0..n_metrics {
            let raw = c.require(&format!("metric.{i}"))?;
            let (k, v) = raw.split_once('=').ok_or_else(|| FormatError::Malformed(format!("metric {raw:?}")))?;
            metrics.push((k.to_string(), v.to_string()));
        }
        let model = Pgcm {
            bank: PrototypeBank { entries, dim: config.embed_dim },
            config,
            encoder,
            image_decoder,
            concept_decoder,
            task_head,
        };
        Ok(Self {
            model,
            seed: c.parse_key("seed")?,
            epoch: c.parse_key("epoch")?,
            metrics,
            dataset_fingerprint: c.require("dataset_fingerprint")?.to_string(),
        })
    }
}

fn read_tensor(c: &Container, name: &str, expected: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
    let (shape, data) = c.f32_array(name)?;
    if shape != expected {
        return Err(CheckpointError::Shape { name: name.to_string(), stored: shape, expected: expected.to_vec() });
    }
    Ok(Tensor::new(shape, data).map_err(ModelError::from)?)
}
