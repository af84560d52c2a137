//! HTTP/JSON service over run configs, asynchronous run jobs and their
//! artifacts. Every route lives under [`API_PREFIX`].

pub mod error;
pub mod jobs;

use std::net::SocketAddr;
use std::path::Path;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vaxopt_core::analysis::{variation_report, VariationReport};
use vaxopt_core::DosingPolicy;
use vaxopt_io::artifact::TrajectoryTable;
use vaxopt_io::config::RunConfig;
use vaxopt_io::pipeline::RunInputs;

pub use error::{ApiError, ApiResult};
pub use jobs::{ConfigEntry, Job, JobState, Store};

pub const API_PREFIX: &str = "/api/v1";

pub fn router(store: Store) -> Router {
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/configs", get(list_configs).post(create_config))
        .route("/configs/{id}", get(get_config))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/simulate", post(simulate))
        .route("/runs/{id}/compare", post(compare))
        .route("/runs/{id}/{artifact}", get(get_artifact))
        .with_state(store);
    Router::new().nest(API_PREFIX, api)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state_dir: &Path, max_jobs: usize) -> std::io::Result<()> {
    let store = Store::open(state_dir, max_jobs).map_err(std::io::Error::other)?;
    store.resume().map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await
}

async fn list_configs(State(store): State<Store>) -> ApiResult<Json<Vec<ConfigEntry>>> {
    Ok(Json(store.configs()?))
}

/// Accepts a JSON config, or TOML when the content type says so.
async fn create_config(State(store): State<Store>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let toml = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("toml"));
    let cfg: RunConfig = if toml {
        let text = std::str::from_utf8(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        RunConfig::from_toml_str(text)?
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?
    };
    let entry = store.put_config(&cfg)?;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

async fn get_config(State(store): State<Store>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RunConfig>> {
    Ok(Json(store.config(&id)?))
}

async fn list_runs(State(store): State<Store>) -> Json<Vec<Job>> {
    Json(store.jobs())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    #[serde(default)]
    pub config_id: Option<String>,
    #[serde(default)]
    pub config: Option<RunConfig>,
}

async fn create_run(State(store): State<Store>, Json(req): Json<RunRequest>) -> ApiResult<Response> {
    let id = match (req.config_id, req.config) {
        (Some(id), None) => id,
        (None, Some(cfg)) => store.put_config(&cfg)?.id,
        _ => return Err(ApiError::BadRequest("give exactly one of `config_id` and `config`".into())),
    };
    let (job, created) = store.submit(&id)?;
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((status, Json(job)).into_response())
}

async fn get_run(State(store): State<Store>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    Ok(Json(store.job(&id)?))
}

#[derive(Debug, Deserialize)]
pub struct ArtifactQuery {
    /// `initial` or `optimal` for policies.
    #[serde(default)]
    pub which: Option<String>,
    /// `json` (default) or `csv` where both exist.
    #[serde(default)]
    pub format: Option<String>,
}

fn artifact_file(artifact: &str, q: &ArtifactQuery) -> ApiResult<String> {
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::BadRequest(format!("unknown format `{other}`"))),
    };
    let which = q.which.as_deref().unwrap_or("optimal");
    if !matches!(which, "initial" | "optimal" | "baseline") {
        return Err(ApiError::BadRequest(format!("unknown policy `{which}`")));
    }
    let name = match (artifact, csv) {
        ("trajectories", false) => "trajectories.json".to_string(),
        ("trajectories", true) => format!("trajectory_{}.csv", if which == "optimal" { "optimal" } else { "baseline" }),
        ("policy", _) => format!(
            "policy_{}.{}",
            if which == "optimal" { "optimal" } else { "initial" },
            if csv { "csv" } else { "json" }
        ),
        ("trace" | "variation", true) => format!("{artifact}.csv"),
        ("trace" | "variation" | "scan" | "calibration" | "reproduction" | "status" | "params", false) => {
            format!("{artifact}.json")
        }
        ("config", _) => "config.toml".to_string(),
        ("manifest", _) => vaxopt_io::artifact::MANIFEST.to_string(),
        _ => return Err(ApiError::NotFound(format!("no artifact `{artifact}` in this format"))),
    };
    Ok(name)
}

/// Artifact files with a strong ETag taken from the manifest digest.
async fn get_artifact(
    State(store): State<Store>,
    UrlPath((id, artifact)): UrlPath<(String, String)>,
    Query(q): Query<ArtifactQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let manifest = store.manifest(&id)?;
    let name = artifact_file(&artifact, &q)?;
    let path = store.run_dir(&id).join(&name);
    let digest = if name == vaxopt_io::artifact::MANIFEST {
        manifest.content_hash.clone()
    } else {
        manifest
            .files
            .get(&name)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("run `{id}` has no {artifact}")))?
    };
    let etag = format!("\"{digest}\"");
    let fresh = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let content_type = match name.rsplit('.').next() {
        Some("csv") => "text/csv",
        Some("toml") => "application/toml",
        _ => "application/json",
    };
    let cache = [
        (header::ETAG, etag.clone()),
        (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
    ];
    if fresh {
        return Ok((StatusCode::NOT_MODIFIED, cache).into_response());
    }
    let body = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
    Ok((StatusCode::OK, cache, [(header::CONTENT_TYPE, content_type.to_string())], body).into_response())
}

fn inputs(store: &Store, id: &str) -> ApiResult<RunInputs> {
    store.manifest(id)?;
    RunInputs::load(&store.run_dir(id)).map_err(|e| ApiError::Conflict(format!("run `{id}` cannot be re-simulated: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    /// First-dose rates `[age][week]` in doses/day.
    pub u1: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateResponse {
    /// The submitted table after projection onto the feasible set.
    pub policy: DosingPolicy,
    pub cost: f64,
    pub trajectory: TrajectoryTable,
}

/// Projects an edited dose table and simulates it over the run's horizon.
async fn simulate(
    State(store): State<Store>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SimulateRequest>,
) -> ApiResult<Json<SimulateResponse>> {
    let inputs = inputs(&store, &id)?;
    let out = tokio::task::spawn_blocking(move || -> ApiResult<SimulateResponse> {
        let policy = inputs.project(&req.u1)?;
        let traj = inputs.simulate(&policy)?;
        Ok(SimulateResponse {
            cost: inputs.cost(&policy)?,
            trajectory: TrajectoryTable::new(&traj, &inputs.params)?,
            policy,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRequest {
    /// Baseline table; the run's initial policy when absent.
    #[serde(default)]
    pub base: Option<Vec<Vec<f64>>>,
    /// Compared table; the run's optimal policy (or initial) when absent.
    #[serde(default)]
    pub optimal: Option<Vec<Vec<f64>>>,
}

/// Variation report between two policies of one run.
async fn compare(
    State(store): State<Store>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<CompareRequest>,
) -> ApiResult<Json<VariationReport>> {
    let inputs = inputs(&store, &id)?;
    let out = tokio::task::spawn_blocking(move || -> ApiResult<VariationReport> {
        let pick = |table: Option<Vec<Vec<f64>>>, default: &DosingPolicy| -> ApiResult<DosingPolicy> {
            match table {
                Some(u1) => Ok(inputs.project(&u1)?),
                None => Ok(default.clone()),
            }
        };
        let base = pick(req.base, &inputs.initial)?;
        let optimal = pick(req.optimal, inputs.optimal.as_ref().unwrap_or(&inputs.initial))?;
        let a = inputs.simulate(&base)?;
        let b = inputs.simulate(&optimal)?;
        Ok(variation_report(&a, &b, &inputs.params)?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}
