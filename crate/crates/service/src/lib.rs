//! HTTP probe service.
//!
//! Serves the cases of a loaded dataset and runs what-if predictions against
//! whichever checkpoint is currently loaded. Requests read an immutable
//! snapshot of the model, so swapping checkpoints never disturbs a request
//! already in flight.

mod dataset;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use socialcircle::probe::{run_probe, NeighborPolyline, ProbeError};
use socialcircle::{Checkpoint, ModelConfig, Point, ProbeRequest, Unit};
use tower_http::cors::CorsLayer;

pub use dataset::{scene_id, CaseIndex, LoadError, SceneSummary};

pub struct LoadedModel {
    pub path: Option<PathBuf>,
    pub checkpoint: Checkpoint,
    pub checksum: String,
}

impl LoadedModel {
    pub fn new(checkpoint: Checkpoint, path: Option<PathBuf>) -> Self {
        let checksum = checkpoint.checksum();
        LoadedModel {
            path,
            checkpoint,
            checksum,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub index: Arc<CaseIndex>,
    model: Arc<RwLock<Option<Arc<LoadedModel>>>>,
}

impl AppState {
    pub fn new(index: CaseIndex, model: Option<LoadedModel>) -> Self {
        AppState {
            index: Arc::new(index),
            model: Arc::new(RwLock::new(model.map(Arc::new))),
        }
    }

    /// The current model snapshot.
    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap_model(&self, model: LoadedModel) {
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(model));
    }

    /// Checks that `config` predicts windows of the indexed shape.
    pub fn compatible(&self, config: &ModelConfig) -> Result<(), String> {
        if config.t_h != self.index.t_h || config.t_f != self.index.t_f {
            return Err(format!(
                "checkpoint uses t_h={} t_f={} but the dataset was windowed with t_h={} t_f={}",
                config.t_h, config.t_f, self.index.t_h, self.index.t_f
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest {
        field: Option<String>,
        message: String,
    },
    NoModel,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::BadRequest { field, message } => (
                StatusCode::BAD_REQUEST,
                json!({ "error": message, "field": field }),
            ),
            ApiError::NoModel => (StatusCode::CONFLICT, json!({ "error": "no model loaded" })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<ProbeError> for ApiError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::UnknownCase(id) => ApiError::NotFound(format!("unknown case `{id}`")),
            ProbeError::Invalid { field, message } => ApiError::BadRequest {
                field: Some(field),
                message,
            },
            ProbeError::NoModel => ApiError::NoModel,
            ProbeError::Model(m) => ApiError::Internal(m.to_string()),
        }
    }
}

/// Parses a JSON body, reporting the path of the offending field.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::BadRequest {
            field: (path != ".").then_some(path),
            message: e.into_inner().to_string(),
        }
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scenes", get(scenes))
        .route("/cases/{id}", get(case))
        .route("/predict", post(predict))
        .route("/model", get(model))
        .route("/model/load", post(load_model))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn scenes(State(state): State<AppState>) -> Json<Vec<SceneSummary>> {
    Json(state.index.scenes().to_vec())
}

#[derive(Serialize)]
struct CaseGeometry<'a> {
    case_id: &'a str,
    scene_id: &'a str,
    target_id: &'a str,
    unit: Unit,
    observed: &'a [Point],
    future: Option<&'a [Point]>,
    neighbors: Vec<NeighborPolyline>,
}

async fn case(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let case = state
        .index
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown case `{id}`")))?;
    let body = CaseGeometry {
        case_id: &case.case_id,
        scene_id: &case.scene_id,
        target_id: &case.target_id,
        unit: case.unit,
        observed: &case.observed,
        future: case.future.as_deref(),
        neighbors: case
            .neighbors
            .iter()
            .map(|n| NeighborPolyline {
                agent_id: n.agent_id.clone(),
                manual: n.manual,
                points: n.window.clone(),
            })
            .collect(),
    };
    Ok(Json(body).into_response())
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let request: ProbeRequest = parse_body(&body)?;
    let model = state.model().ok_or(ApiError::NoModel)?;
    let case = state
        .index
        .get(&request.case_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown case `{}`", request.case_id)))?
        .clone();
    let response =
        tokio::task::spawn_blocking(move || run_probe(&model.checkpoint, &case, &request))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(response).into_response())
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    path: Option<String>,
    checksum: &'a str,
    config: &'a ModelConfig,
    n_parameters: usize,
}

fn model_info(model: &LoadedModel) -> Response {
    Json(ModelInfo {
        path: model.path.as_ref().map(|p| p.display().to_string()),
        checksum: &model.checksum,
        config: &model.checkpoint.config,
        n_parameters: model.checkpoint.params.n_values(),
    })
    .into_response()
}

async fn model(State(state): State<AppState>) -> Result<Response, ApiError> {
    let model = state.model().ok_or(ApiError::NoModel)?;
    Ok(model_info(&model))
}

#[derive(Deserialize)]
struct LoadRequest {
    path: PathBuf,
}

async fn load_model(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let LoadRequest { path } = parse_body(&body)?;
    let bad_path = |message: String| ApiError::BadRequest {
        field: Some("path".into()),
        message,
    };
    let loaded = {
        let path = path.clone();
        tokio::task::spawn_blocking(move || Checkpoint::load(&path))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
            .map_err(|e| bad_path(e.to_string()))?
    };
    state.compatible(&loaded.config).map_err(bad_path)?;
    let model = LoadedModel::new(loaded, Some(path));
    let response = model_info(&model);
    state.swap_model(model);
    Ok(response)
}
