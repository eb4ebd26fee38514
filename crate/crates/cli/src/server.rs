//! HTTP API behind the annotation interface. Responses never carry step
//! timing, so annotators stay blind to the regression target.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use cogchain_core::chain::{merge_spans, CognitiveChain};
use cogchain_core::difficulty::validate_params;
use cogchain_core::extraction::{step_inputs, SemanticAnnotation, SEMANTICS_FILE};

use crate::error::CliError;
use crate::project::*;
use crate::report::{self, ReportKind};

#[derive(Clone)]
pub struct AppState {
    pub project: Arc<Project>,
    write_lock: Arc<Mutex<()>>,
}

impl AppState {
    pub fn new(project: Project) -> Self {
        Self {
            project: Arc::new(project),
            write_lock: Arc::new(Mutex::new(())),
        }
    }
}

/// Persisted annotation state of one trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationState {
    /// 0 until the first accepted edit.
    pub revision: u64,
}

/// One line of the append-only edit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLogEntry {
    pub revision: u64,
    pub changed_steps: Vec<usize>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChainsUpdate {
    /// The revision the edit was based on.
    pub revision: u64,
    pub chains: Vec<CognitiveChain>,
    #[serde(default)]
    pub note: String,
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match e {
            CliError::Prerequisite { .. } => StatusCode::NOT_FOUND,
            CliError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/traces", get(list_traces))
        .route("/traces/{id}", get(get_trace))
        .route("/traces/{id}/steps/{i}/screenshot", get(get_screenshot))
        .route("/traces/{id}/chains", get(get_chains).put(put_chains))
        .route("/reports/{kind}", get(get_report))
        .with_state(state)
}

pub async fn serve(project: Project, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(project))).await
}

/// Rejects ids that are not bundle directories, including any path tricks.
fn known_trace(project: &Project, id: &str) -> ApiResult<()> {
    if project.all_trace_ids()?.iter().any(|t| t == id) {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("no trace '{id}'")))
    }
}

pub fn annotation_state(project: &Project, id: &str) -> Result<AnnotationState, CliError> {
    let path = project.derived_dir(id).join(ANNOTATION_STATE_FILE);
    if path.is_file() {
        read_json(&path)
    } else {
        Ok(AnnotationState::default())
    }
}

/// Annotated chains when present, else the machine chains.
fn current_chains(project: &Project, id: &str) -> Result<(bool, Vec<CognitiveChain>), CliError> {
    if project.chains_path(id, ChainSource::Annotated).is_file() {
        Ok((true, project.load_chains(id, ChainSource::Annotated)?))
    } else {
        Ok((false, project.load_chains(id, ChainSource::Raw)?))
    }
}

async fn list_traces(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let p = &state.project;
    let mut out = Vec::new();
    for id in p.all_trace_ids()? {
        let meta = p.meta(&id)?;
        let n_steps = p.load_trace(&id).ok().map(|t| t.len());
        out.push(json!({
            "id": id,
            "task_id": meta.task_id,
            "user_id": meta.user_id,
            "n_steps": n_steps,
            "revision": annotation_state(p, &id)?.revision,
            "annotated": p.chains_path(&id, ChainSource::Annotated).is_file(),
        }));
    }
    Ok(Json(Value::Array(out)))
}

async fn get_trace(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = &state.project;
    known_trace(p, &id)?;
    let trace = p.load_trace(&id)?;
    let bundle = p.load_bundle(&id)?;
    let inputs = step_inputs(&bundle, &trace);
    let sem_path = p.derived_dir(&id).join(SEMANTICS_FILE);
    let semantics: Vec<SemanticAnnotation> = if sem_path.is_file() { read_json(&sem_path)? } else { Vec::new() };
    let machine = p.load_chains(&id, ChainSource::Raw).ok();
    let steps: Vec<Value> = inputs
        .iter()
        .map(|input| {
            let i = input.index;
            let sem = semantics.iter().find(|s| s.event_index == i);
            json!({
                "step_index": i,
                "kind": trace.steps[i].kind,
                "record": input.record,
                "event_description": sem.map(|s| s.event_description.clone()),
                "image_description": sem.map(|s| s.image_description.clone()).filter(|d| !d.is_empty()),
                "screenshot_url": input.screenshot.as_ref().map(|_| format!("/traces/{id}/steps/{i}/screenshot")),
                "machine_chain": machine.as_ref().and_then(|c| c.get(i)),
            })
        })
        .collect();
    Ok(Json(json!({
        "id": id,
        "task_id": trace.task_id,
        "user_id": trace.user_id,
        "steps": steps,
    })))
}

async fn get_screenshot(State(state): State<AppState>, Path((id, i)): Path<(String, usize)>) -> ApiResult<Response> {
    let p = &state.project;
    known_trace(p, &id)?;
    let trace = p.load_trace(&id)?;
    let step = trace
        .steps
        .get(i)
        .ok_or_else(|| ApiError::not_found(format!("trace {id} has no step {i}")))?;
    let shot = step
        .screenshot_ref
        .as_deref()
        .ok_or_else(|| ApiError::not_found(format!("step {i} has no screenshot")))?;
    let bundle = p.load_bundle(&id)?;
    let path = bundle.screenshot_path(shot);
    let bytes = std::fs::read(&path).map_err(|e| ApiError::from(CliError::io(&path)(e)))?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn get_chains(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let p = &state.project;
    known_trace(p, &id)?;
    let (annotated, chains) = current_chains(p, &id)?;
    Ok(Json(json!({
        "id": id,
        "revision": annotation_state(p, &id)?.revision,
        "annotated": annotated,
        "chains": chains,
    })))
}

fn validate_update(chains: &[CognitiveChain], n_steps: usize) -> Result<(), String> {
    merge_spans(chains, n_steps).map_err(|e| e.to_string())?;
    for chain in chains {
        for (pos, step) in chain.steps.iter().enumerate() {
            validate_params(step.ctype, &step.params)
                .map_err(|e| format!("step {}, chain position {pos}: {e}", chain.motor_step_index))?;
        }
    }
    Ok(())
}

async fn put_chains(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(update): Json<ChainsUpdate>,
) -> ApiResult<Json<Value>> {
    let p = &state.project;
    known_trace(p, &id)?;
    let _guard = state.write_lock.lock().await;
    let current = annotation_state(p, &id)?;
    if update.revision != current.revision {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            body: json!({
                "error": "stale revision",
                "current_revision": current.revision,
            }),
        });
    }
    let trace = p.load_trace(&id)?;
    validate_update(&update.chains, trace.len()).map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m))?;
    let (_, before) = current_chains(p, &id)?;
    let changed_steps: Vec<usize> = (0..trace.len())
        .filter(|&i| before.get(i) != update.chains.get(i))
        .collect();

    let revision = current.revision + 1;
    let dir = p.derived_dir(&id);
    write_json(&p.chains_path(&id, ChainSource::Annotated), &update.chains)?;
    let entry = EditLogEntry {
        revision,
        changed_steps: changed_steps.clone(),
        note: update.note,
    };
    let log_path = dir.join(ANNOTATION_LOG_FILE);
    let mut line = serde_json::to_string(&entry).expect("entry serializes");
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| ApiError::from(CliError::io(&log_path)(e)))?;
    // The state file is written last: a crash before it leaves the old
    // revision current, and the next save simply overwrites the chains.
    write_json(&dir.join(ANNOTATION_STATE_FILE), &AnnotationState { revision })?;
    Ok(Json(json!({ "revision": revision, "changed_steps": changed_steps })))
}

async fn get_report(State(state): State<AppState>, Path(kind): Path<String>) -> ApiResult<Response> {
    let kind = ReportKind::parse(&kind).ok_or_else(|| ApiError::not_found(format!("no report '{kind}'")))?;
    if kind == ReportKind::Scatter {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "scatter carries step timings and is not served to annotators",
        ));
    }
    let text = report::render(&state.project, kind)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response())
}
