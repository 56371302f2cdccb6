//! Human labeling queue, its HTTP API and the oracle that waits on it.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use aler_core::{CandidatePair, LabelBatch, Oracle, OracleBudget, OracleError, Progress, Provenance, RecordCollection};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const TOKEN_HEADER: &str = "x-aler-token";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("pair ({0}, {1}) is already pending")]
    AlreadyPending(String, String),
    #[error("record {0:?} not found")]
    UnknownRecord(String),
    #[error("task {0} not found")]
    UnknownTask(u64),
    #[error("task {0} already answered")]
    AlreadyAnswered(u64),
    #[error("label budget exhausted")]
    BudgetExhausted,
    #[error("label must be 0 or 1")]
    BadLabel,
}

impl QueueError {
    fn status(&self) -> StatusCode {
        match self {
            QueueError::UnknownTask(_) => StatusCode::NOT_FOUND,
            QueueError::AlreadyAnswered(_) | QueueError::AlreadyPending(..) => StatusCode::CONFLICT,
            QueueError::BudgetExhausted => StatusCode::FORBIDDEN,
            QueueError::BadLabel | QueueError::UnknownRecord(_) => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attribute {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelTask {
    pub task_id: u64,
    pub r_id: String,
    pub s_id: String,
    pub r: Vec<Attribute>,
    pub s: Vec<Attribute>,
    pub status: TaskStatus,
    pub answer: Option<u8>,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ack {
    pub consumed: usize,
    pub remaining: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStatus {
    pub chunk: usize,
    pub iteration: usize,
    pub f1_history: Vec<f64>,
}

#[derive(Debug, Default)]
struct QueueState {
    tasks: BTreeMap<u64, LabelTask>,
    pending: BTreeMap<CandidatePair, u64>,
    next_id: u64,
    budget: OracleBudget,
    status: RunStatus,
}

/// Shared between the training loop and any number of HTTP handlers.
#[derive(Debug, Default)]
pub struct TaskQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
}

fn attributes(records: &RecordCollection, id: &str) -> Result<Vec<Attribute>, QueueError> {
    let rec = records.get(id).ok_or_else(|| QueueError::UnknownRecord(id.to_string()))?;
    Ok(records
        .schema()
        .iter()
        .zip(&rec.values)
        .map(|(n, v)| Attribute { name: n.clone(), value: v.clone() })
        .collect())
}

impl TaskQueue {
    pub fn new(hard_cap: Option<usize>) -> Self {
        Self {
            state: Mutex::new(QueueState { budget: OracleBudget::new(hard_cap), next_id: 1, ..Default::default() }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Creates one pending task per pair, ids consecutive. Nothing is
    /// enqueued if any pair is already pending or unknown.
    pub fn enqueue_tasks(
        &self,
        pairs: &[CandidatePair],
        records_r: &RecordCollection,
        records_s: &RecordCollection,
        provenance: Provenance,
    ) -> Result<Vec<u64>, QueueError> {
        let mut st = self.lock();
        let mut built = Vec::with_capacity(pairs.len());
        let mut seen = std::collections::BTreeSet::new();
        for p in pairs {
            if st.pending.contains_key(p) || !seen.insert(p) {
                return Err(QueueError::AlreadyPending(p.r.clone(), p.s.clone()));
            }
            built.push((p, attributes(records_r, &p.r)?, attributes(records_s, &p.s)?));
        }
        let mut ids = Vec::with_capacity(built.len());
        for (p, r, s) in built {
            let id = st.next_id;
            st.next_id += 1;
            st.pending.insert(p.clone(), id);
            st.tasks.insert(
                id,
                LabelTask {
                    task_id: id,
                    r_id: p.r.clone(),
                    s_id: p.s.clone(),
                    r,
                    s,
                    status: TaskStatus::Pending,
                    answer: None,
                    provenance: provenance.to_string(),
                },
            );
            ids.push(id);
        }
        Ok(ids)
    }

    /// Pending tasks in id order.
    pub fn pending(&self, limit: usize) -> Vec<LabelTask> {
        let st = self.lock();
        st.tasks.values().filter(|t| t.status == TaskStatus::Pending).take(limit).cloned().collect()
    }

    pub fn task(&self, id: u64) -> Option<LabelTask> {
        self.lock().tasks.get(&id).cloned()
    }

    pub fn submit_label(&self, id: u64, label: u8) -> Result<Ack, QueueError> {
        if label > 1 {
            return Err(QueueError::BadLabel);
        }
        let mut st = self.lock();
        let st = &mut *st;
        let task = st.tasks.get_mut(&id).ok_or(QueueError::UnknownTask(id))?;
        if task.status == TaskStatus::Answered {
            return Err(QueueError::AlreadyAnswered(id));
        }
        st.budget.consume().map_err(|_| QueueError::BudgetExhausted)?;
        task.status = TaskStatus::Answered;
        task.answer = Some(label);
        st.pending.remove(&CandidatePair::new(task.r_id.clone(), task.s_id.clone()));
        self.changed.notify_all();
        Ok(Ack { consumed: st.budget.consumed(), remaining: st.budget.remaining() })
    }

    /// Blocks until every task in `ids` is answered, the budget runs out,
    /// or `timeout` passes. Returns the answers and which condition ended
    /// the wait.
    pub fn wait_for(&self, ids: &[u64], timeout: Option<Duration>) -> LabelBatch {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            let answers: Vec<Option<u8>> = ids.iter().map(|id| st.tasks.get(id).and_then(|t| t.answer)).collect();
            let done = answers.iter().all(Option::is_some);
            let exhausted = !done && st.budget.is_exhausted();
            let timed_out = !done && deadline.is_some_and(|d| Instant::now() >= d);
            if done || exhausted || timed_out {
                return LabelBatch { answers, exhausted, timed_out };
            }
            st = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    self.changed.wait_timeout(st, left).unwrap_or_else(|p| p.into_inner()).0
                }
                None => self.changed.wait(st).unwrap_or_else(|p| p.into_inner()),
            };
        }
    }

    /// Drops still-pending tasks among `ids`.
    pub fn cancel(&self, ids: &[u64]) {
        let mut st = self.lock();
        for id in ids {
            if st.tasks.get(id).is_some_and(|t| t.status == TaskStatus::Pending) {
                let t = st.tasks.remove(id).expect("present");
                st.pending.remove(&CandidatePair::new(t.r_id, t.s_id));
            }
        }
    }

    pub fn consumed(&self) -> usize {
        self.lock().budget.consumed()
    }

    pub fn budget(&self) -> OracleBudget {
        self.lock().budget
    }

    pub fn answered_count(&self) -> usize {
        self.lock().tasks.values().filter(|t| t.status == TaskStatus::Answered).count()
    }

    pub fn set_progress(&self, progress: &Progress<'_>) {
        let mut st = self.lock();
        st.status = RunStatus {
            chunk: progress.chunk,
            iteration: progress.iteration,
            f1_history: progress.f1_history.to_vec(),
        };
    }

    pub fn status_json(&self) -> serde_json::Value {
        let st = self.lock();
        json!({
            "chunk": st.status.chunk,
            "iteration": st.status.iteration,
            "f1_history": st.status.f1_history,
            "budget": {
                "consumed": st.budget.consumed(),
                "remaining": st.budget.remaining(),
                "hard_cap": st.budget.hard_cap(),
            },
        })
    }
}

/// Oracle that publishes tasks to a [`TaskQueue`] and waits for humans.
pub struct HttpOracle {
    pub queue: Arc<TaskQueue>,
    pub records_r: Arc<RecordCollection>,
    pub records_s: Arc<RecordCollection>,
    pub timeout: Option<Duration>,
}

impl Oracle for HttpOracle {
    fn label(&mut self, pairs: &[CandidatePair], provenance: Provenance) -> Result<LabelBatch, OracleError> {
        if pairs.is_empty() {
            return Ok(LabelBatch::default());
        }
        let ids = self
            .queue
            .enqueue_tasks(pairs, &self.records_r, &self.records_s, provenance)
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let batch = self.queue.wait_for(&ids, self.timeout);
        if !batch.is_complete() {
            self.queue.cancel(&ids);
        }
        Ok(batch)
    }

    fn consumed(&self) -> usize {
        self.queue.consumed()
    }

    fn progress(&mut self, progress: &Progress<'_>) {
        self.queue.set_progress(progress);
    }
}

#[derive(Clone)]
struct AppState {
    queue: Arc<TaskQueue>,
    token: Option<String>,
    static_dir: Option<PathBuf>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn authorized(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    match &state.token {
        Some(t) if headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) != Some(t.as_str()) => {
            Err(error(StatusCode::UNAUTHORIZED, "missing or wrong token"))
        }
        _ => Ok(()),
    }
}

#[derive(Deserialize)]
struct TaskQuery {
    limit: Option<usize>,
}

async fn get_tasks(State(st): State<AppState>, headers: HeaderMap, Query(q): Query<TaskQuery>) -> Response {
    if let Err(r) = authorized(&st, &headers) {
        return r;
    }
    Json(st.queue.pending(q.limit.unwrap_or(50))).into_response()
}

#[derive(Deserialize)]
struct LabelBody {
    task_id: u64,
    label: u8,
}

async fn post_label(State(st): State<AppState>, headers: HeaderMap, body: Result<Json<LabelBody>, JsonRejection>) -> Response {
    if let Err(r) = authorized(&st, &headers) {
        return r;
    }
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match st.queue.submit_label(body.task_id, body.label) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => error(e.status(), e.to_string()),
    }
}

async fn get_status(State(st): State<AppState>, headers: HeaderMap) -> Response {
    if let Err(r) = authorized(&st, &headers) {
        return r;
    }
    Json(st.queue.status_json()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_static(State(st): State<AppState>, uri: axum::http::Uri) -> Response {
    let Some(root) = &st.static_dir else {
        return error(StatusCode::NOT_FOUND, "no static directory configured");
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = Path::new(if rel.is_empty() { "index.html" } else { rel });
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::BAD_REQUEST, "bad path");
    }
    match std::fs::read(root.join(rel)) {
        Ok(bytes) => ([(axum::http::header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, format!("{} not found", uri.path())),
    }
}

pub fn router(queue: Arc<TaskQueue>, token: Option<String>, static_dir: Option<PathBuf>) -> Router {
    Router::new()
        .route("/api/tasks", get(get_tasks))
        .route("/api/labels", post(post_label))
        .route("/api/status", get(get_status))
        .fallback(get(get_static))
        .with_state(AppState { queue, token, static_dir })
}

/// A server running on its own thread; dropped handles shut it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn spawn_server(addr: &str, app: Router) -> std::io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let served = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = served.await {
                log::error!("labeling service stopped: {e}");
            }
        });
    });
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
