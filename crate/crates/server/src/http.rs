//! HTTP API over the run harness.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use citycoord_core::api::*;
use citycoord_core::harness::{
    cmd_compare, cmd_demand, cmd_run, cmd_validate, run_dir_name, Comparison, DemandExport, EpisodeDriver,
    HarnessError, RunMode, RunOptions, RunOutput, RunReport, ScenarioFile, ValidationOutcome, REPORT_FILE,
};
use citycoord_core::reward::{Judge, DEFAULT_RUBRIC};
use serde_json::json;

use crate::judge::HttpJudge;
use crate::link::{agent_link, AgentLink};

/// Shared service state: where runs are written and the runs started by
/// this process.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    out_root: PathBuf,
    judge_timeout: Duration,
    runs: Mutex<BTreeMap<String, RunEntry>>,
}

struct RunEntry {
    view: RunView,
    link: Option<AgentLink>,
}

impl AppState {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                out_root: out_root.into(),
                judge_timeout: Duration::from_secs(60),
                runs: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    pub fn out_root(&self) -> &std::path::Path {
        &self.inner.out_root
    }

    fn runs(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, RunEntry>> {
        self.inner.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn finish(&self, id: &str, result: Result<RunOutput, ApiError>) -> RunView {
        let mut runs = self.runs();
        let entry = runs.get_mut(id).expect("run registered before launch");
        entry.link = None;
        match result {
            Ok(out) => {
                entry.view.state = RunState::Done;
                entry.view.dir = Some(out.dir);
                entry.view.report = Some(out.report);
            }
            Err(e) => {
                entry.view.state = RunState::Failed;
                entry.view.error = Some(e);
            }
        }
        entry.view.clone()
    }
}

/// Error reply: `{"error": {"code", "message"}}` with a matching status.
#[derive(Debug)]
pub struct Failure(pub StatusCode, pub ApiError);

impl Failure {
    fn new(code: &str, message: impl Into<String>) -> Self {
        let error = ApiError {
            code: code.to_owned(),
            message: message.into(),
        };
        Failure(status_for(&error.code), error)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let error = ApiError::from(&e);
        Failure(status_for(&error.code), error)
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(status_for(&e.code), e)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "invalid_scenario" => StatusCode::UNPROCESSABLE_ENTITY,
        "parse" | "no_agent" | "bad_request" | "not_external" => StatusCode::BAD_REQUEST,
        "missing_baseline" | "mismatch" | "run_in_progress" => StatusCode::CONFLICT,
        "unknown_run" => StatusCode::NOT_FOUND,
        "run_finished" => StatusCode::GONE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn blocking<T, F>(f: F) -> Result<T, Failure>
where
    F: FnOnce() -> Result<T, HarnessError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new("internal", e.to_string()))?
        .map_err(Failure::from)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/validate", post(validate))
        .route("/demand", post(demand))
        .route("/compare", post(compare))
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/messages", post(send_message))
        .route("/runs/{id}/hangup", post(hang_up))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn validate(Json(req): Json<ScenarioRequest>) -> Result<Json<ValidationOutcome>, Failure> {
    blocking(move || cmd_validate(&req.scenario)).await.map(Json)
}

async fn demand(Json(req): Json<DemandRequest>) -> Result<Json<DemandExport>, Failure> {
    blocking(move || cmd_demand(&req.scenario, &req.out_dir, req.seed))
        .await
        .map(Json)
}

async fn compare(State(state): State<AppState>, Json(req): Json<CompareRequest>) -> Result<Json<Comparison>, Failure> {
    let resolve = |r: &str| {
        let under = state.out_root().join(r);
        if under.exists() {
            under
        } else {
            PathBuf::from(r)
        }
    };
    let (a, b) = (resolve(&req.a), resolve(&req.b));
    blocking(move || cmd_compare(a, b)).await.map(Json)
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunView>> {
    let runs = state.runs();
    Json(
        runs.values()
            .map(|e| RunView {
                report: None,
                ..e.view.clone()
            })
            .collect(),
    )
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunView>, Failure> {
    if let Some(e) = state.runs().get(&id) {
        return Ok(Json(e.view.clone()));
    }
    // Runs from earlier processes are served from disk.
    let dir = state.out_root().join(&id);
    let path = dir.join(REPORT_FILE);
    if !path.is_file() {
        return Err(Failure::new("unknown_run", format!("no run named {id}")));
    }
    let report = blocking(move || RunReport::load(&path)).await?;
    Ok(Json(RunView {
        id,
        mode: report.mode,
        state: RunState::Done,
        dir: Some(dir),
        report: Some(report),
        error: None,
    }))
}

async fn start_run(State(state): State<AppState>, Json(req): Json<RunRequest>) -> Result<Response, Failure> {
    let scenario = req.scenario.clone();
    let file = blocking(move || ScenarioFile::load(&scenario)).await?;
    let seed = req.seed.unwrap_or(file.scenario.seed);
    let id = run_dir_name(&file.scenario.name, seed, req.mode);
    let external = req.mode == RunMode::External;
    let (link, driver) = if external {
        let (l, d) = agent_link();
        (Some(l), Some(d))
    } else {
        (None, None)
    };
    let view = RunView {
        id: id.clone(),
        mode: req.mode,
        state: RunState::Running,
        dir: None,
        report: None,
        error: None,
    };
    {
        let mut runs = state.runs();
        if runs.get(&id).is_some_and(|e| e.view.state == RunState::Running) {
            return Err(Failure::new("run_in_progress", format!("{id} is already running")));
        }
        runs.insert(
            id.clone(),
            RunEntry {
                view: view.clone(),
                link,
            },
        );
    }
    tracing::info!(run = %id, "run started");

    let out_root = state.out_root().to_path_buf();
    let timeout = state.inner.judge_timeout;
    let wait = req.wait.unwrap_or(!external);
    let job = tokio::task::spawn_blocking(move || -> Result<RunOutput, ApiError> {
        let judge = match &req.judge_url {
            Some(url) => Some(HttpJudge::new(url.clone(), timeout).map_err(|e| ApiError {
                code: "bad_request".into(),
                message: e.to_string(),
            })?),
            None => None,
        };
        let mut driver = driver;
        let opts = RunOptions {
            out_root,
            seed: req.seed,
            judge: judge.as_ref().map(|j| (j as &dyn Judge, DEFAULT_RUBRIC)),
            driver: driver.as_mut().map(|d| d as &mut dyn EpisodeDriver),
        };
        cmd_run(&req.scenario, req.mode, opts).map_err(|e| ApiError::from(&e))
    });
    let registry = state.clone();
    let run_id = id.clone();
    let finished = tokio::spawn(async move {
        let result = job.await.unwrap_or_else(|e| {
            Err(ApiError {
                code: "internal".into(),
                message: e.to_string(),
            })
        });
        if let Err(e) = &result {
            tracing::warn!(run = %run_id, code = %e.code, "run failed");
        } else {
            tracing::info!(run = %run_id, "run finished");
        }
        registry.finish(&run_id, result)
    });
    if !wait {
        return Ok((StatusCode::ACCEPTED, Json(view)).into_response());
    }
    let done = finished.await.map_err(|e| Failure::new("internal", e.to_string()))?;
    match done.error {
        Some(e) => Err(e.into()),
        None => Ok(Json(done).into_response()),
    }
}

fn link_for(state: &AppState, id: &str) -> Result<AgentLink, Failure> {
    let runs = state.runs();
    let entry = runs
        .get(id)
        .ok_or_else(|| Failure::new("unknown_run", format!("no run named {id}")))?;
    if entry.view.mode != RunMode::External {
        return Err(Failure::new(
            "not_external",
            format!("{id} does not take agent messages"),
        ));
    }
    entry
        .link
        .clone()
        .ok_or_else(|| Failure::new("run_finished", format!("{id} has finished")))
}

/// Body and reply are single protocol messages.
async fn send_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> Result<Response, Failure> {
    let link = link_for(&state, &id)?;
    let reply = link
        .send_line(body)
        .await
        .map_err(|_| Failure::new("run_finished", format!("{id} has finished")))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], reply).into_response())
}

async fn hang_up(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, Failure> {
    link_for(&state, &id)?.hang_up().await;
    Ok(StatusCode::NO_CONTENT)
}
