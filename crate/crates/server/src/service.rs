//! Service state and HTTP routes.
//!
//! Readers clone an `Arc` to the current snapshot and never block on edits.
//! Edits are serialized through one mutex: the writer builds a complete new
//! snapshot from a copy of the model, appends the journal entry and swaps the
//! snapshot in one step.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};

use pgcm::checkpoint::ModelCheckpoint;
use pgcm::data::GlyphSum;
use pgcm::eval::evaluate;
use pgcm::interventions::{EditRequest, PredictionState};
use pgcm::model::{ConceptAlignmentTable, Pgcm, PrototypeView};
use pgcm::tensor::Tensor;

use crate::error::ApiError;
use crate::journal::{EditJson, Journal, JournalEntry, JournalError};
use crate::wire::*;

/// Immutable view of the model served to readers.
pub struct Snapshot {
    pub version: u64,
    pub model: Pgcm<f32>,
    pub view: PrototypeView<f32>,
    pub table: ConceptAlignmentTable<f32>,
}

impl Snapshot {
    fn build(version: u64, model: Pgcm<f32>) -> Result<Self, ApiError> {
        let view = model.prototype_view()?;
        let table = model.build_alignment_table(model.config.tau)?;
        Ok(Self { version, model, view, table })
    }

    pub fn from_model(model: Pgcm<f32>) -> Result<Self, ApiError> {
        Self::build(0, model)
    }

    pub fn table_json(&self) -> TableJson {
        let cfg = &self.model.config;
        let rows = self.table.rows.iter().map(|r| RowJson::new(r, &self.model.bank.entries[r.index], cfg)).collect();
        TableJson { tau: self.table.tau, rows }
    }

    pub fn row_json(&self, j: usize) -> Result<RowJson, ApiError> {
        let entry = self.model.bank.active_entry(j)?;
        let row = self.table.row(j).ok_or_else(|| ApiError::not_found("unknown_prototype", format!("prototype {j}")))?;
        Ok(RowJson::new(row, entry, &self.model.config))
    }
}

pub struct ServiceState {
    base: Pgcm<f32>,
    meta: ModelCheckpoint,
    dataset: Option<GlyphSum>,
    journal_path: Option<PathBuf>,
    snapshot: RwLock<Arc<Snapshot>>,
    journal: Mutex<Journal>,
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("building the initial snapshot: {0}")]
    Snapshot(ApiError),
}

impl ServiceState {
    /// Starts from `checkpoint`; an existing journal at `journal_path` is
    /// replayed on top of it.
    pub fn new(
        checkpoint: ModelCheckpoint,
        dataset: Option<GlyphSum>,
        journal_path: Option<PathBuf>,
    ) -> Result<Self, StartError> {
        let journal = match &journal_path {
            Some(p) if p.exists() => Journal::read(p)?,
            _ => Journal::default(),
        };
        let current = journal.replay(&checkpoint.model)?;
        let snapshot = Snapshot::build(0, current).map_err(StartError::Snapshot)?;
        Ok(Self {
            base: checkpoint.model.clone(),
            meta: checkpoint,
            dataset,
            journal_path,
            snapshot: RwLock::new(Arc::new(snapshot)),
            journal: Mutex::new(journal),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn journal(&self) -> Journal {
        self.journal.lock().expect("journal lock").clone()
    }

    pub fn dataset(&self) -> Option<&GlyphSum> {
        self.dataset.as_ref()
    }

    /// Applies one edit atomically and records it.
    pub fn apply_edit(&self, edit: EditJson) -> Result<(JournalEntry, Arc<Snapshot>), ApiError> {
        let mut journal = self.journal.lock().expect("journal lock");
        let current = self.snapshot();
        let mut model = current.model.clone();
        let index = model.apply_edit(&EditRequest::from(&edit))?;
        let next = Arc::new(Snapshot::build(current.version + 1, model)?);
        let entry = JournalEntry { id: journal.next_id(), timestamp_ms: now_ms(), edit, index };
        journal.entries.push(entry.clone());
        *self.snapshot.write().expect("snapshot lock") = next.clone();
        Ok((entry, next))
    }

    /// Replays the journal onto the base checkpoint and compares with the
    /// served model.
    pub fn verify_replay(&self) -> Result<bool, JournalError> {
        let journal = self.journal.lock().expect("journal lock");
        let replayed = journal.replay(&self.base)?;
        Ok(replayed == self.snapshot().model)
    }

    /// Verifies the journal and writes it to the configured path.
    pub fn persist(&self) -> Result<Option<&Path>, PersistError> {
        if !self.verify_replay()? {
            return Err(PersistError::ReplayMismatch);
        }
        let Some(path) = &self.journal_path else { return Ok(None) };
        self.journal.lock().expect("journal lock").write(path)?;
        Ok(Some(path))
    }

    fn metrics(&self) -> Result<ServiceMetrics, ApiError> {
        let snap = self.snapshot();
        let test = match &self.dataset {
            Some(d) => Some(MetricsJson::from(&evaluate(&snap.model, &d.test, self.meta.seed, &d.fingerprint())?)),
            None => None,
        };
        Ok(ServiceMetrics {
            seed: self.meta.seed,
            epoch: self.meta.epoch,
            dataset_fingerprint: self.meta.dataset_fingerprint.clone(),
            checkpoint: self.meta.metrics.clone(),
            journal_len: self.journal.lock().expect("journal lock").len(),
            active_prototypes: snap.model.bank.num_active(),
            test,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal replay does not reproduce the served model")]
    ReplayMismatch,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

type Shared = Arc<ServiceState>;
type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::new(e.status(), "invalid_body", e.body_text()))
}

fn index(path: Result<UrlPath<usize>, PathRejection>) -> Result<usize, ApiError> {
    path.map(|UrlPath(j)| j).map_err(|e| ApiError::bad_request("invalid_path", e.body_text()))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/table", get(table))
        .route("/v1/metrics", get(metrics))
        .route("/v1/prototypes", post(add_prototype))
        .route("/v1/prototypes/{j}", get(get_prototype).delete(remove_prototype))
        .route("/v1/prototypes/{j}/concepts", post(relabel).put(relabel))
        .route("/v1/predict", post(predict))
        .route("/v1/instances/{i}", get(instance))
        .with_state(state)
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    let snap = s.snapshot();
    Json(Health {
        status: "ok".into(),
        version: snap.version,
        active_prototypes: snap.model.bank.num_active(),
        journal_len: s.journal.lock().expect("journal lock").len(),
    })
}

async fn table(State(s): State<Shared>) -> Json<TableJson> {
    Json(s.snapshot().table_json())
}

async fn metrics(State(s): State<Shared>) -> ApiResult<ServiceMetrics> {
    let s2 = s.clone();
    let m = tokio::task::spawn_blocking(move || s2.metrics())
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(m))
}

async fn get_prototype(State(s): State<Shared>, j: Result<UrlPath<usize>, PathRejection>) -> ApiResult<RowJson> {
    Ok(Json(s.snapshot().row_json(index(j)?)?))
}

async fn relabel(
    State(s): State<Shared>,
    j: Result<UrlPath<usize>, PathRejection>,
    payload: Result<Json<RelabelBody>, JsonRejection>,
) -> ApiResult<EditResponse> {
    let j = index(j)?;
    let b = body(payload)?;
    let (entry, snap) = s.apply_edit(EditJson::Relabel { prototype: j, bits: b.bits })?;
    Ok(Json(EditResponse { journal_id: entry.id, index: j, row: Some(snap.row_json(j)?) }))
}

async fn remove_prototype(State(s): State<Shared>, j: Result<UrlPath<usize>, PathRejection>) -> ApiResult<EditResponse> {
    let j = index(j)?;
    let (entry, _) = s.apply_edit(EditJson::Remove { prototype: j })?;
    Ok(Json(EditResponse { journal_id: entry.id, index: j, row: None }))
}

async fn add_prototype(State(s): State<Shared>, payload: Result<Json<AddBody>, JsonRejection>) -> ApiResult<EditResponse> {
    let b = body(payload)?;
    let pixels = flatten_image(&b.image, &s.snapshot().model.config)?;
    let (entry, snap) = s.apply_edit(EditJson::Add { pixels, bits: b.bits, source: b.source })?;
    Ok(Json(EditResponse { journal_id: entry.id, index: entry.index, row: Some(snap.row_json(entry.index)?) }))
}

async fn predict(State(s): State<Shared>, payload: Result<Json<PredictBody>, JsonRejection>) -> ApiResult<PredictResponse> {
    let b = body(payload)?;
    let snap = s.snapshot();
    let cfg = &snap.model.config;
    if b.parts.len() != cfg.parts {
        return Err(ApiError::bad_request("shape", format!("expected {} parts, got {}", cfg.parts, b.parts.len())));
    }
    let mut flat = Vec::with_capacity(cfg.parts * cfg.part_dim());
    for p in &b.parts {
        flat.extend(flatten_image(p, cfg)?);
    }
    let parts = Tensor::new(vec![cfg.parts, cfg.part_dim()], flat).map_err(|e| ApiError::internal(e.to_string()))?;
    let pre_state = PredictionState::new(&snap.model, &snap.view, &parts)?;
    let mut post_state = pre_state.clone();
    for iv in &b.interventions {
        post_state.apply(&iv.into())?;
    }
    Ok(Json(PredictResponse {
        active: snap.view.active.clone(),
        pre: PredictionJson::new(&pre_state, &snap.model)?,
        post: PredictionJson::new(&post_state, &snap.model)?,
    }))
}

async fn instance(State(s): State<Shared>, i: Result<UrlPath<usize>, PathRejection>) -> ApiResult<InstanceJson> {
    let i = index(i)?;
    let d = s.dataset().ok_or_else(|| ApiError::not_found("no_dataset", "service started without a dataset"))?;
    let inst = d.test.instances.get(i).ok_or_else(|| {
        ApiError::not_found("unknown_instance", format!("test instance {i} out of range ({})", d.test.len()))
    })?;
    let cfg = &s.snapshot().model.config;
    Ok(Json(InstanceJson {
        index: i,
        id: inst.id,
        task_label: inst.task_label,
        parts: inst.parts.iter().map(|p| PartJson::new(p, cfg)).collect(),
    }))
}
