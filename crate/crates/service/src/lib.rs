//! HTTP retrieval over a fused index.
//!
//! Endpoints:
//!
//! - `POST /v1/search` takes `{"vector": [...], "k": 5}` or
//!   `{"study_id": "...", "modality": "image", "k": 5}` and returns the top-`k`
//!   hits with their labels and cosine scores.
//! - `GET /v1/healthz` answers `ok`.
//! - `GET /v1/stats` reports the entry count, dimension and build metadata.
//!
//! The index, embeddings and model are loaded once and shared read-only
//! between requests.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use xmodal::index::{load_index, query_by_id, Modality};
use xmodal::ingest::read_embeddings;
use xmodal::model::load_params;
use xmodal::{EmbeddingSet, FusedIndex, Label, ModelParams};

pub const MAX_K: usize = 1000;
const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Data(#[from] xmodal::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(#[source] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub index_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub service_version: &'static str,
}

pub struct AppState {
    pub index: FusedIndex,
    pub embeddings: Option<EmbeddingSet>,
    pub params: Option<ModelParams>,
    pub metadata: Metadata,
}

impl AppState {
    pub fn new(index: FusedIndex, embeddings: Option<EmbeddingSet>, params: Option<ModelParams>) -> Self {
        AppState {
            index,
            embeddings,
            params,
            metadata: Metadata {
                index_path: None,
                embeddings_path: None,
                model_path: None,
                service_version: env!("CARGO_PKG_VERSION"),
            },
        }
    }

    /// Load every artifact up front and check that their dimensions agree.
    pub fn load(index: &Path, embeddings: Option<&Path>, model: Option<&Path>) -> Result<Self, ServiceError> {
        let idx = load_index(index)?;
        let set = embeddings.map(read_embeddings).transpose()?;
        let params = model.map(load_params).transpose()?;
        for (what, dim) in [
            ("embedding set", set.as_ref().map(EmbeddingSet::dim)),
            ("model", params.as_ref().map(ModelParams::dim)),
        ] {
            if let Some(d) = dim.filter(|&d| d != idx.dim()) {
                return Err(xmodal::Error::Shape(format!("{what} has dimension {d}, index has {}", idx.dim())).into());
            }
        }
        let mut state = AppState::new(idx, set, params);
        state.metadata.index_path = Some(index.to_path_buf());
        state.metadata.embeddings_path = embeddings.map(Path::to_path_buf);
        state.metadata.model_path = model.map(Path::to_path_buf);
        Ok(state)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    #[serde(default)]
    pub vector: Option<Vec<f64>>,
    #[serde(default)]
    pub study_id: Option<String>,
    #[serde(default)]
    pub modality: Option<Modality>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub exclude_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub study_id: String,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<Hit>,
    pub took_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub dim: usize,
    pub embeddings: Option<usize>,
    pub model_loaded: bool,
    pub parallel: bool,
    pub metadata: serde_json::Value,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<xmodal::Error> for ApiError {
    fn from(e: xmodal::Error) -> Self {
        use xmodal::Error as E;
        let status = match e {
            E::NotFound(_) => StatusCode::NOT_FOUND,
            E::Shape(_) | E::Parameter(_) | E::DegenerateVector { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/search", post(search))
        .route("/v1/healthz", get(healthz))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    Json(Stats {
        count: state.index.len(),
        dim: state.index.dim(),
        embeddings: state.embeddings.as_ref().map(EmbeddingSet::len),
        model_loaded: state.params.is_some(),
        parallel: xmodal::Execution::default().is_parallel(),
        metadata: serde_json::to_value(&state.metadata).unwrap_or_default(),
    })
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let start = Instant::now();
    let req: SearchRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed request: {e}")))?;
    let k = req.k.unwrap_or(DEFAULT_K);
    if !(1..=MAX_K).contains(&k) {
        return Err(bad_request(format!("k must be between 1 and {MAX_K}, got {k}")));
    }
    let result = match (req.vector, req.study_id) {
        (Some(vector), None) => {
            if vector.len() != state.index.dim() {
                return Err(bad_request(format!(
                    "vector has dimension {}, expected D = {}",
                    vector.len(),
                    state.index.dim()
                )));
            }
            state.index.search(&vector, k)?
        }
        (None, Some(id)) => {
            let modality = req
                .modality
                .ok_or_else(|| bad_request("study_id queries need a modality (image or text)"))?;
            let set = state
                .embeddings
                .as_ref()
                .ok_or_else(|| bad_request("study_id queries need the service to be started with an embedding set"))?;
            query_by_id(
                &state.index,
                set,
                state.params.as_ref(),
                &id,
                modality,
                k,
                req.exclude_self,
            )?
        }
        _ => return Err(bad_request("exactly one of vector or study_id is required")),
    };
    let results = result
        .hits
        .into_iter()
        .map(|h| Hit {
            study_id: h.study_id,
            label: Label::name(h.label).to_string(),
            score: h.score,
        })
        .collect();
    Ok(Json(SearchResponse {
        results,
        took_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Serve until Ctrl-C.
pub async fn serve(state: AppState, bind: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|source| ServiceError::Bind { addr: bind, source })?;
    log::info!(
        "serving {} entries of dimension {} on {bind}",
        state.index.len(),
        state.index.dim()
    );
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServiceError::Server)
}
