//! HTTP/JSON control plane: launch, observe and stop optimization runs.
//!
//! One run executes at a time, on its own worker thread. Every trial is
//! appended to the run's log before it becomes visible through the API, so
//! any snapshot served here is a prefix of what is on disk.

mod error;
mod runs;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use microtune_core::runspec::{RunSpec, RunSpecDoc};
use microtune_core::space::{parse_space, SearchSpace};

pub use error::ApiError;
pub use runs::{IncumbentSummary, Progress, RunHandle, RunRegistry, RunView, TrialPage};

pub const DATA_DIR_VAR: &str = "MICROTUNE_DATA_DIR";
pub const LISTEN_VAR: &str = "MICROTUNE_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Root for `spaces/`, relative spec references, and `runs/` logs.
    pub data_dir: PathBuf,
    pub listen: SocketAddr,
}

impl ServerConfig {
    /// Reads `MICROTUNE_DATA_DIR` (default `data`) and `MICROTUNE_LISTEN`.
    pub fn from_env() -> Result<Self, String> {
        let data_dir = std::env::var_os(DATA_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| "data".into());
        let listen = std::env::var(LISTEN_VAR).unwrap_or_else(|_| DEFAULT_LISTEN.into());
        let listen = listen
            .parse()
            .map_err(|e| format!("{LISTEN_VAR}={listen:?}: {e}"))?;
        Ok(ServerConfig { data_dir, listen })
    }
}

#[derive(Clone)]
pub struct AppState {
    data_dir: Arc<PathBuf>,
    runs: RunRegistry,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir: PathBuf = data_dir.into();
        AppState {
            runs: RunRegistry::new(data_dir.join("runs")),
            data_dir: Arc::new(data_dir),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn runs(&self) -> &RunRegistry {
        &self.runs
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/runs", post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/trials", get(list_trials))
        .route("/api/runs/{id}/stop", post(stop_run))
        .route("/api/spaces", get(list_spaces))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `config.listen` and serves until the process is terminated.
pub async fn serve(config: ServerConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    axum::serve(listener, router(AppState::new(config.data_dir))).await
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(config: ServerConfig) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config))
}

async fn create_run(
    State(state): State<AppState>,
    body: Result<Json<RunSpecDoc>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<RunHandle>), ApiError> {
    let Json(doc) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let spec = RunSpec::from_doc(&doc, state.data_dir()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let handle = state.runs.start(spec)?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_run(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RunView>, ApiError> {
    Ok(Json(state.runs.view(&id)?))
}

#[derive(Debug, Deserialize)]
struct TrialsQuery {
    since: Option<u64>,
}

async fn list_trials(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<TrialsQuery>,
) -> Result<Json<TrialPage>, ApiError> {
    Ok(Json(state.runs.trials(&id, query.since)?))
}

async fn stop_run(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RunHandle>, ApiError> {
    Ok(Json(state.runs.stop(&id)?))
}

#[derive(Debug, Serialize)]
pub struct SpaceEntry {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
    /// Why the file could not be loaded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SpaceList {
    pub spaces: Vec<SpaceEntry>,
}

async fn list_spaces(State(state): State<AppState>) -> Result<Json<SpaceList>, ApiError> {
    let dir = state.data_dir().join("spaces");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(ApiError::internal(format!("{}: {e}", dir.display()))),
    };
    files.sort();
    let spaces = files
        .iter()
        .map(|path| {
            let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let loaded = std::fs::read_to_string(path)
                .map_err(|e| e.to_string())
                .and_then(|text| parse_space(&text).map_err(|e| e.to_string()));
            match loaded {
                Ok(space) => SpaceEntry {
                    file,
                    name: Some(space.name().to_string()),
                    cardinality: Some(space.cardinality()),
                    space: Some(space),
                    error: None,
                },
                Err(error) => SpaceEntry {
                    file,
                    name: None,
                    cardinality: None,
                    space: None,
                    error: Some(error),
                },
            }
        })
        .collect();
    Ok(Json(SpaceList { spaces }))
}
