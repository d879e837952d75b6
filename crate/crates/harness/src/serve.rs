//! HTTP service that runs one experiment with a human in the loop.
//!
//! One thread drives the run loop; axum handlers share nothing with it but
//! the feedback queue and a progress snapshot.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use navadapt_core::envgraph::{Edge, GraphWorld, NodeId};
use navadapt_core::metrics::RunReport;
use navadapt_core::oracles::{FeedbackQueue, FeedbackResponse, InteractiveOracle, RespondError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::config::{ExperimentConfig, OracleKind, SCHEMA_VERSION};
use crate::error::HarnessError;
use crate::run::{self, LogRecord, RunOutput};

const DEFAULT_HISTORY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Pretraining or building the test suite.
    Starting,
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatus {
    pub schema_version: u32,
    pub phase: Phase,
    pub method: String,
    pub seed: u64,
    pub completed: usize,
    pub total: usize,
    /// Feedback requests waiting for an answer.
    pub pending: usize,
    /// Metrics over the episodes completed so far.
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldNode {
    pub id: NodeId,
    pub position: [f64; 2],
}

/// Geometry needed to draw a test world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldView {
    pub schema_version: u32,
    pub index: usize,
    pub nodes: Vec<WorldNode>,
    pub edges: Vec<Edge>,
}

impl WorldView {
    fn new(index: usize, world: &GraphWorld) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            index,
            nodes: world.nodes().iter().map(|n| WorldNode { id: n.id, position: n.position }).collect(),
            edges: world.edges().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub schema_version: u32,
    /// Episodes completed so far; `records` is the tail.
    pub total: usize,
    pub records: Vec<LogRecord>,
}

struct Progress {
    phase: Phase,
    report: Option<RunReport>,
    history: Vec<LogRecord>,
    error: Option<String>,
}

struct AppState {
    queue: Arc<FeedbackQueue>,
    progress: Mutex<Progress>,
    worlds: Vec<GraphWorld>,
    episodes_per_world: usize,
    method: String,
    seed: u64,
    total: usize,
}

type Shared = Arc<AppState>;

fn error_body(status: StatusCode, code: &str, detail: String) -> Response {
    (status, Json(json!({ "error": code, "detail": detail }))).into_response()
}

async fn status(State(s): State<Shared>) -> Json<RunStatus> {
    let p = s.progress.lock().expect("progress poisoned");
    Json(RunStatus {
        schema_version: SCHEMA_VERSION,
        phase: p.phase,
        method: s.method.clone(),
        seed: s.seed,
        completed: p.history.len(),
        total: s.total,
        pending: s.queue.pending_len(),
        report: p.report.clone(),
        error: p.error.clone(),
    })
}

async fn pending(State(s): State<Shared>) -> Response {
    match s.queue.pending() {
        Some(req) => Json(req).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn feedback(State(s): State<Shared>, body: Bytes) -> Response {
    let response: FeedbackResponse = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    match s.queue.respond(&response) {
        Ok(()) => Json(json!({ "status": "accepted", "episode_id": response.episode_id })).into_response(),
        Err(e @ RespondError::UnknownEpisode(_)) => error_body(StatusCode::NOT_FOUND, "unknown_episode", e.to_string()),
        Err(e @ RespondError::Duplicate(_)) => error_body(StatusCode::CONFLICT, "duplicate", e.to_string()),
    }
}

#[derive(Deserialize)]
struct HistoryQuery {
    limit: Option<usize>,
}

async fn history(State(s): State<Shared>, Query(q): Query<HistoryQuery>) -> Json<History> {
    let p = s.progress.lock().expect("progress poisoned");
    let limit = q.limit.unwrap_or(DEFAULT_HISTORY);
    let start = p.history.len().saturating_sub(limit);
    Json(History {
        schema_version: SCHEMA_VERSION,
        total: p.history.len(),
        records: p.history[start..].to_vec(),
    })
}

#[derive(Deserialize)]
struct WorldQuery {
    index: Option<usize>,
    episode: Option<u64>,
}

/// The world of `?index=`, of `?episode=`, or else of the pending request,
/// the last finished episode, or the first world.
async fn world(State(s): State<Shared>, Query(q): Query<WorldQuery>) -> Response {
    let index = q.index.or(q.episode.map(|e| e as usize / s.episodes_per_world)).unwrap_or_else(|| {
        if let Some(req) = s.queue.pending() {
            return req.episode_id as usize / s.episodes_per_world;
        }
        let p = s.progress.lock().expect("progress poisoned");
        p.history.last().map(|r| r.world).unwrap_or(0)
    });
    match s.worlds.get(index) {
        Some(w) => Json(WorldView::new(index, w)).into_response(),
        None => error_body(StatusCode::NOT_FOUND, "unknown_world", format!("no test world {index}")),
    }
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/run/status", get(status))
        .route("/api/feedback/pending", get(pending))
        .route("/api/feedback", axum::routing::post(feedback))
        .route("/api/history", get(history))
        .route("/api/world", get(world))
        .with_state(state)
}

/// A running service. Dropping it without `shutdown` leaves the threads
/// running until the process exits.
pub struct ServeHandle {
    addr: SocketAddr,
    run: Option<JoinHandle<Result<RunOutput, HarnessError>>>,
    server: Option<JoinHandle<()>>,
    stop: Option<oneshot::Sender<()>>,
}

impl ServeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the run loop finishes and returns its output. The HTTP
    /// interface keeps serving the final state.
    pub fn wait_run(&mut self) -> Result<RunOutput, HarnessError> {
        let handle = self
            .run
            .take()
            .ok_or_else(|| HarnessError::Server("run result already taken".into()))?;
        handle.join().map_err(|_| HarnessError::Server("run loop panicked".into()))?
    }

    /// Stops the HTTP server and waits for it to exit.
    pub fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(server) = self.server.take() {
            let _ = server.join();
        }
    }

    /// Blocks until the HTTP server exits (it only does on shutdown).
    pub fn join_server(mut self) {
        if let Some(server) = self.server.take() {
            let _ = server.join();
        }
    }
}

/// Starts the run loop and the HTTP interface on `addr` (port 0 picks a
/// free port). When `out` is given the finished run log is written there.
pub fn start(cfg: &ExperimentConfig, seed: u64, addr: SocketAddr, out: Option<PathBuf>) -> Result<ServeHandle, HarnessError> {
    cfg.validate()?;
    if cfg.oracle != OracleKind::Interactive {
        return Err(HarnessError::Config("serve requires oracle = interactive".into()));
    }
    let listener = TcpListener::bind(addr).map_err(|e| HarnessError::Server(format!("cannot bind {addr}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| HarnessError::Server(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| HarnessError::Server(e.to_string()))?;

    let suite = run::test_suite(cfg, seed)?;
    let queue = Arc::new(FeedbackQueue::new());
    let state = Arc::new(AppState {
        queue: queue.clone(),
        progress: Mutex::new(Progress { phase: Phase::Starting, report: None, history: Vec::new(), error: None }),
        worlds: suite.worlds,
        episodes_per_world: cfg.episodes_per_world,
        method: cfg.method.name().to_string(),
        seed,
        total: cfg.total_episodes(),
    });

    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| HarnessError::Server(e.to_string()))?;
    let app = router(state.clone());
    let server = std::thread::Builder::new()
        .name("navadapt-http".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!(error = %e, "listener setup failed");
                        return;
                    }
                };
                let stop = async {
                    let _ = stop_rx.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stop).await {
                    tracing::error!(error = %e, "http server failed");
                }
            })
        })
        .map_err(|e| HarnessError::Server(e.to_string()))?;

    let cfg = cfg.clone();
    let run_state = state;
    let run = std::thread::Builder::new()
        .name("navadapt-run".into())
        .spawn(move || {
            let mut oracle = InteractiveOracle::new(queue, Duration::from_secs_f64(cfg.interactive_timeout_s), cfg.fallback);
            let mut observer = |rec: &LogRecord, _: &GraphWorld, report: &RunReport| {
                let mut p = run_state.progress.lock().expect("progress poisoned");
                p.phase = Phase::Running;
                p.history.push(rec.clone());
                p.report = Some(report.clone());
            };
            let result = run::run_with(&cfg, seed, &mut oracle, &mut observer).and_then(|output| {
                if let Some(dir) = &out {
                    output.write(dir)?;
                }
                Ok(output)
            });
            let mut p = run_state.progress.lock().expect("progress poisoned");
            match &result {
                Ok(_) => p.phase = Phase::Finished,
                Err(e) => {
                    p.phase = Phase::Failed;
                    p.error = Some(e.to_string());
                }
            }
            result
        })
        .map_err(|e| HarnessError::Server(e.to_string()))?;

    tracing::info!(%addr, "serving");
    Ok(ServeHandle { addr, run: Some(run), server: Some(server), stop: Some(stop_tx) })
}
