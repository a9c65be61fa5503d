//! JSON shapes of the HTTP API. Images travel as nested `[C][H][W]` arrays.

use serde::{Deserialize, Serialize};

use pgcm::data::ImagePart;
use pgcm::eval::MetricsReport;
use pgcm::interventions::{InterventionKind, InterventionRequest, PredictionState};
use pgcm::model::{AlignmentRow, ModelConfig, PartSource, Pgcm, PrototypeEntry};

use crate::error::ApiError;

pub type Image = Vec<Vec<Vec<f32>>>;

pub fn nest_image(pixels: &[f32], cfg: &ModelConfig) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    pixels.chunks(h * w).map(|ch| ch.chunks(w).map(<[f32]>::to_vec).collect()).collect()
}

pub fn flatten_image(image: &Image, cfg: &ModelConfig) -> Result<Vec<f32>, ApiError> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let ok = image.len() == c && image.iter().all(|ch| ch.len() == h && ch.iter().all(|row| row.len() == w));
    if !ok {
        return Err(ApiError::bad_request("shape", format!("image must have shape [{c}, {h}, {w}]")));
    }
    let flat: Vec<f32> = image.iter().flatten().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("non_finite", "image contains non-finite values"));
    }
    Ok(flat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceJson {
    pub part_id: u64,
    pub digit: u8,
}

impl From<PartSource> for SourceJson {
    fn from(s: PartSource) -> Self {
        Self { part_id: s.part_id, digit: s.digit }
    }
}

impl From<SourceJson> for PartSource {
    fn from(s: SourceJson) -> Self {
        Self { part_id: s.part_id, digit: s.digit }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowJson {
    pub index: usize,
    pub status: String,
    pub image: Image,
    pub concepts: Vec<f32>,
    pub active_concepts: Vec<usize>,
    #[serde(rename = "override")]
    pub concept_override: Option<Vec<bool>>,
    pub source: Option<SourceJson>,
}

impl RowJson {
    pub fn new(row: &AlignmentRow<f32>, entry: &PrototypeEntry<f32>, cfg: &ModelConfig) -> Self {
        Self {
            index: row.index,
            status: row.status.as_str().to_string(),
            image: nest_image(&row.image, cfg),
            concepts: row.concepts.clone(),
            active_concepts: row.active_concepts.clone(),
            concept_override: entry.concept_override.clone(),
            source: entry.source.map(Into::into),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableJson {
    pub tau: f64,
    pub rows: Vec<RowJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelabelBody {
    pub bits: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AddBody {
    pub image: Image,
    #[serde(default)]
    pub bits: Option<Vec<bool>>,
    #[serde(default)]
    pub source: Option<SourceJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub journal_id: u64,
    pub index: usize,
    /// The edited row; absent after a removal.
    pub row: Option<RowJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKindJson {
    ConceptStandard { concept: usize, value: bool },
    ConceptPropagating { concept: usize, value: bool },
    PrototypeForce { prototype: usize },
    PrototypeExclude { prototypes: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionJson {
    pub part: usize,
    #[serde(flatten)]
    pub kind: InterventionKindJson,
}

impl From<&InterventionJson> for InterventionRequest {
    fn from(iv: &InterventionJson) -> Self {
        let kind = match &iv.kind {
            InterventionKindJson::ConceptStandard { concept, value } => {
                InterventionKind::ConceptStandard { concept: *concept, value: *value }
            }
            InterventionKindJson::ConceptPropagating { concept, value } => {
                InterventionKind::ConceptPropagating { concept: *concept, value: *value }
            }
            InterventionKindJson::PrototypeForce { prototype } => InterventionKind::PrototypeForce { prototype: *prototype },
            InterventionKindJson::PrototypeExclude { prototypes } => {
                InterventionKind::PrototypeExclude { prototypes: prototypes.clone() }
            }
        };
        InterventionRequest { part_index: iv.part, kind }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictBody {
    pub parts: Vec<Image>,
    #[serde(default)]
    pub interventions: Vec<InterventionJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionJson {
    /// Per part, over `active` in order.
    pub selector: Vec<Vec<f32>>,
    pub concepts: Vec<Vec<f32>>,
    pub hard_concepts: Vec<Vec<bool>>,
    pub task: Vec<f32>,
    pub task_prediction: usize,
    pub selected_prototypes: Vec<usize>,
}

impl PredictionJson {
    pub fn new(state: &PredictionState<f32>, model: &Pgcm<f32>) -> Result<Self, ApiError> {
        let k = state.num_concepts();
        let task = state.task_distribution(model)?;
        let hard = state.hard_concepts();
        Ok(Self {
            selector: state.parts.iter().map(|p| p.selector.clone()).collect(),
            concepts: state.parts.iter().map(|p| p.concepts.clone()).collect(),
            hard_concepts: hard.chunks(k).map(<[bool]>::to_vec).collect(),
            task_prediction: pgcm::tensor::argmax(&task),
            task,
            selected_prototypes: state.selected_prototypes(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub active: Vec<usize>,
    pub pre: PredictionJson,
    pub post: PredictionJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub concept_accuracy: f64,
    pub task_accuracy: f64,
    pub per_concept: Vec<Option<f64>>,
    pub instances: usize,
}

impl From<&MetricsReport> for MetricsJson {
    fn from(r: &MetricsReport) -> Self {
        Self {
            concept_accuracy: r.concept_accuracy,
            task_accuracy: r.task_accuracy,
            per_concept: r.concept.per_concept.clone(),
            instances: r.instances,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub seed: u64,
    pub epoch: usize,
    pub dataset_fingerprint: String,
    pub checkpoint: Vec<(String, String)>,
    pub journal_len: usize,
    pub active_prototypes: usize,
    /// Test-split metrics of the current bank, when a dataset is loaded.
    pub test: Option<MetricsJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: u64,
    pub active_prototypes: usize,
    pub journal_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartJson {
    pub image: Image,
    pub digit: u8,
    pub label: u8,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub index: usize,
    pub id: u64,
    pub task_label: u8,
    pub parts: Vec<PartJson>,
}

impl PartJson {
    pub fn new(part: &ImagePart, cfg: &ModelConfig) -> Self {
        Self {
            image: nest_image(&part.pixels, cfg),
            digit: part.digit,
            label: part.label,
            color: format!("{:?}", part.color).to_lowercase(),
        }
    }
}
