//! Session-based JSON protocol over the sandbox tools.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use shopsandbox_core::metrics::{aggregate, evaluate_task, MetricsConfig, TaskResult};
use shopsandbox_core::sandbox::{EpisodeState, EpisodeStatus, Environment, SandboxError, ToolCall};
use shopsandbox_core::taskgen::Task;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into() }
    }

    fn unknown_session(id: &str) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id:?}"))
    }

    fn invalid(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "InvalidParams", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

pub struct Session {
    task: Arc<Task>,
    state: EpisodeState,
    created_at: u64,
    last_active: Instant,
}

/// Shared service state. The session registry is the only mutable map;
/// each session carries its own lock so posts to one session serialize.
pub struct AppState {
    env: Environment,
    tasks: BTreeMap<String, Arc<Task>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    results: Mutex<BTreeMap<String, TaskResult>>,
    metrics: MetricsConfig,
    idle_timeout: Duration,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn new_session_id() -> String {
    hex::encode(rand::random::<u128>().to_be_bytes())
}

impl AppState {
    pub fn new(env: Environment, tasks: Vec<Task>, idle_timeout: Duration) -> AppState {
        AppState {
            env,
            tasks: tasks.into_iter().map(|t| (t.task_id.clone(), Arc::new(t))).collect(),
            sessions: Mutex::new(HashMap::new()),
            results: Mutex::new(BTreeMap::new()),
            metrics: MetricsConfig::default(),
            idle_timeout,
        }
    }

    pub fn session_count(&self) -> usize {
        lock(&self.sessions).len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sweep_expired(Instant::now());
        lock(&self.sessions).get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    fn evaluate(&self, session_id: &str, s: &Session) -> Result<TaskResult, ApiError> {
        let result = evaluate_task(&s.task, &s.state.recommended, self.env.catalog(), &self.metrics)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "EvaluationFailed", e.to_string()))?;
        lock(&self.results).insert(session_id.to_owned(), result.clone());
        Ok(result)
    }

    /// Drop sessions idle past the timeout. Each one is closed as aborted
    /// and scored so it still counts in the report.
    pub fn sweep_expired(&self, now: Instant) -> usize {
        let expired: Vec<(String, Arc<Mutex<Session>>)> = {
            let mut sessions = lock(&self.sessions);
            let ids: Vec<String> = sessions
                .iter()
                .filter(|(_, s)| now.saturating_duration_since(lock(s).last_active) >= self.idle_timeout)
                .map(|(id, _)| id.clone())
                .collect();
            ids.into_iter().filter_map(|id| sessions.remove(&id).map(|s| (id, s))).collect()
        };
        for (id, session) in &expired {
            let mut s = lock(session);
            if !s.state.status.is_terminal() {
                s.state.status = EpisodeStatus::Aborted;
            }
            let _ = self.evaluate(id, &s);
        }
        expired.len()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    task_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionBody {
    name: String,
    #[serde(default)]
    params: Map<String, Value>,
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed request body: {e}")))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    app.sweep_expired(Instant::now());
    let task = app
        .tasks
        .get(&req.task_id)
        .cloned()
        .ok_or_else(|| ApiError::invalid(format!("unknown task {:?}", req.task_id)))?;
    let state = app.env.start_episode(&task);
    let id = new_session_id();
    let view = task.agent_view();
    let body = json!({
        "session_id": id,
        "task_id": view.task_id,
        "intent": view.intent,
        "instruction": view.instruction,
        "step_limit": state.step_limit,
    });
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session { task, state, created_at, last_active: Instant::now() };
    lock(&app.sessions).insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn post_action(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: ActionBody = parse_body(&body)?;
    let session = app.session(&id)?;
    let env = app.env.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = lock(&session);
        s.last_active = Instant::now();
        let call = ToolCall { name: req.name, params: req.params };
        let observation = env.step(&mut s.state, &call).map_err(|e| match e {
            SandboxError::EpisodeFinished(_) => ApiError::new(
                StatusCode::CONFLICT,
                "EpisodeFinished",
                format!("session {id} has finished with status {:?}", s.state.status),
            ),
        })?;
        Ok(Json(json!({ "observation": observation, "step_index": observation.step_index, "status": s.state.status })))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let session = app.session(&id)?;
    let s = lock(&session);
    Ok(Json(json!({
        "session_id": id,
        "task_id": s.task.task_id,
        "intent": s.task.intent,
        "instruction": s.task.instruction,
        "status": s.state.status,
        "step_count": s.state.step_count,
        "step_limit": s.state.step_limit,
        "recommended": s.state.recommended,
        "history": s.state.history,
        "created_at": s.created_at,
    })))
}

async fn evaluate_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let session = app.session(&id)?;
    let s = lock(&session);
    if !s.state.status.is_terminal() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "EpisodeRunning",
            "evaluation is available once the episode has terminated",
        ));
    }
    let result = app.evaluate(&id, &s)?;
    Ok(Json(json!({
        "session_id": id,
        "task_id": result.task_id,
        "status": s.state.status,
        "success": u8::from(result.success),
        "mean_relevance": result.mean_relevance,
        "scores": result.scores,
    })))
}

async fn list_tasks(State(app): State<Arc<AppState>>) -> Json<Value> {
    let tasks: Vec<Value> = app.tasks.values().map(|t| json!({ "task_id": t.task_id, "intent": t.intent })).collect();
    Json(json!({ "tasks": tasks }))
}

async fn report(State(app): State<Arc<AppState>>) -> ApiResult {
    app.sweep_expired(Instant::now());
    let results: Vec<TaskResult> = lock(&app.results).values().cloned().collect();
    Ok(Json(serde_json::to_value(aggregate(&results)).expect("report serializes")))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/tasks", get(list_tasks))
        .route("/v1/report", get(report))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/actions", post(post_action))
        .route("/v1/sessions/{id}/evaluate", post(evaluate_session))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint") })
        .with_state(state)
}
