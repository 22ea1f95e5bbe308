//! HTTP steering and monitoring service.
//!
//! Each experiment is owned by one actor task that holds its [`Broker`];
//! handlers talk to it over a command queue, so every mutation is serialized
//! through the engine. Journal records are mirrored into a shared [`Feed`]
//! after they are durable, and event streams read from there.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use broker_core::broker::{Broker, ClientCommand, CommandError, QosPatch, RunConfig};
use broker_core::engine::{FileJournal, JournalStore, MemoryJournal, StorageError};
use broker_core::fabric::FabricParams;
use broker_core::model::{JobState, QoSConstraints, ResourceId, Secs};
use broker_core::timeseries::{export_timeseries, TimeseriesError, DEFAULT_INTERVAL};
use broker_core::WWG_TESTBED;
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::time::Instant;

/// Virtual seconds per wall second: one virtual minute per second.
pub const DEFAULT_PACE: f64 = 60.0;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: Option<PathBuf>,
    pub testbed_dir: PathBuf,
    pub pace: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: None,
            testbed_dir: PathBuf::from("testbeds"),
            pace: DEFAULT_PACE,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum End {
    Finished,
    Halted,
    Deleted,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
struct FeedStatus {
    len: usize,
    end: Option<End>,
}

/// Append-only mirror of an experiment's journal.
pub struct Feed {
    lines: RwLock<Vec<Arc<str>>>,
    status: watch::Sender<FeedStatus>,
}

impl Feed {
    fn new(lines: Vec<String>) -> Arc<Self> {
        let lines: Vec<Arc<str>> = lines.into_iter().map(Arc::from).collect();
        let (status, _) = watch::channel(FeedStatus {
            len: lines.len(),
            end: None,
        });
        Arc::new(Feed {
            lines: RwLock::new(lines),
            status,
        })
    }

    fn push(&self, line: &str) {
        let len = {
            let mut lines = self.lines.write().unwrap();
            lines.push(Arc::from(line));
            lines.len()
        };
        self.status.send_modify(|s| s.len = len);
    }

    fn end(&self, end: End) {
        self.status.send_if_modified(|s| {
            if s.end.is_some() && end != End::Deleted {
                return false;
            }
            s.end = Some(end);
            true
        });
    }

    fn snapshot(&self) -> Vec<Arc<str>> {
        self.lines.read().unwrap().clone()
    }
}

/// Journal store that publishes each line once it is durable.
struct Tee {
    inner: Box<dyn JournalStore>,
    feed: Arc<Feed>,
}

impl JournalStore for Tee {
    fn append(&mut self, line: &str) -> Result<(), StorageError> {
        self.inner.append(line)?;
        self.feed.push(line);
        Ok(())
    }

    fn lines(&self) -> Result<Vec<String>, StorageError> {
        self.inner.lines()
    }
}

enum Request {
    Command(ClientCommand, oneshot::Sender<Result<Value, CommandError>>),
    Status(oneshot::Sender<Value>),
    Jobs {
        state: Option<JobState>,
        resource: Option<ResourceId>,
        reply: oneshot::Sender<Value>,
    },
    Shutdown(oneshot::Sender<()>),
}

#[derive(Clone)]
struct Handle {
    tx: mpsc::Sender<Request>,
    feed: Arc<Feed>,
    journal: Option<PathBuf>,
}

struct Registry {
    config: ServiceConfig,
    experiments: Mutex<BTreeMap<String, Handle>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Registry>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState(Arc::new(Registry {
            config,
            experiments: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    /// Recovers every journal found in the data directory. Returns the ids
    /// brought back.
    pub fn recover_all(&self) -> io::Result<Vec<String>> {
        let Some(dir) = self.0.config.data_dir.clone() else {
            return Ok(Vec::new());
        };
        std::fs::create_dir_all(&dir)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut ids = Vec::new();
        for path in paths {
            let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else { continue };
            match self.recover_one(&id, &path) {
                Ok(()) => ids.push(id),
                Err(e) => eprintln!("skipping {}: {e}", path.display()),
            }
        }
        Ok(ids)
    }

    fn recover_one(&self, id: &str, path: &FsPath) -> Result<(), String> {
        let journal = FileJournal::open(path).map_err(|e| e.to_string())?;
        let feed = Feed::new(journal.lines().map_err(|e| e.to_string())?);
        let tee = Tee {
            inner: Box::new(journal),
            feed: feed.clone(),
        };
        let broker = Broker::recover(Box::new(tee)).map_err(|e| e.to_string())?;
        if let Some(n) = id.strip_prefix("exp-").and_then(|n| n.parse::<u64>().ok()) {
            self.0.next_id.fetch_max(n + 1, Ordering::SeqCst);
        }
        self.spawn(id.to_string(), broker, feed, Some(path.to_path_buf()), self.0.config.pace);
        Ok(())
    }

    fn spawn(&self, id: String, broker: Broker, feed: Arc<Feed>, journal: Option<PathBuf>, pace: f64) {
        let (tx, rx) = mpsc::channel(64);
        tokio::spawn(actor(broker, rx, feed.clone(), pace));
        self.0
            .experiments
            .lock()
            .unwrap()
            .insert(id, Handle { tx, feed, journal });
    }

    fn handle(&self, id: &str) -> Result<Handle, ApiError> {
        self.0
            .experiments
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown experiment `{id}`")))
    }

    fn testbed(&self, reference: Option<&str>) -> Result<String, ApiError> {
        let Some(r) = reference else {
            return Ok(WWG_TESTBED.to_string());
        };
        if r.contains("[[resource]]") {
            return Ok(r.to_string());
        }
        if r == "wwg" {
            return Ok(WWG_TESTBED.to_string());
        }
        let safe = !r.is_empty() && r.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !r.contains("..");
        if safe {
            let dir = &self.0.config.testbed_dir;
            for candidate in [dir.join(r), dir.join(format!("{r}.testbed"))] {
                if let Ok(text) = std::fs::read_to_string(&candidate) {
                    return Ok(text);
                }
            }
        }
        Err(ApiError::invalid(format!("unknown testbed `{r}`")))
    }
}

// ---------------------------------------------------------------------------
// actor

fn status_json(broker: &Broker, error: Option<&str>) -> Value {
    let e = broker.experiment();
    let counts: BTreeMap<&str, usize> = JobState::ALL.iter().map(|s| (s.name(), e.count_in(*s))).collect();
    let remaining = e
        .qos
        .effective_budget()
        .map(|b| b.saturating_sub(e.accounts.spent + e.accounts.committed));
    json!({
        "id": e.id,
        "phase": e.phase,
        "t": broker.now(),
        "seq": broker.state().seq,
        "qos": e.qos,
        "accounts": {
            "spent": e.accounts.spent,
            "committed": e.accounts.committed,
            "remaining": remaining,
        },
        "jobs": counts,
        "summary": broker.summary(),
        "error": error,
    })
}

fn jobs_json(broker: &Broker, state: Option<JobState>, resource: Option<&ResourceId>) -> Value {
    let rows: Vec<Value> = broker
        .experiment()
        .jobs
        .values()
        .filter(|j| state.is_none_or(|s| j.state == s))
        .filter(|j| {
            resource.is_none_or(|r| {
                j.assigned_resource.as_ref() == Some(r) || j.attempts.last().is_some_and(|a| &a.resource == r)
            })
        })
        .map(|j| {
            json!({
                "id": j.id,
                "state": j.state,
                "resource": j.assigned_resource.as_ref().or(j.attempts.last().map(|a| &a.resource)),
                "attempts": j.attempts.len(),
                "last_outcome": j.attempts.last().map(|a| a.outcome),
                "command": j.spec.command,
            })
        })
        .collect();
    Value::Array(rows)
}

struct Actor {
    broker: Broker,
    feed: Arc<Feed>,
    error: Option<String>,
}

impl Actor {
    fn idle(&self) -> bool {
        self.error.is_some() || self.broker.next_instant().is_none()
    }

    fn step(&mut self) {
        if let Err(e) = self.broker.step() {
            self.fail(e.to_string());
        }
        self.settle();
    }

    fn advance_to(&mut self, t: Secs) {
        if let Err(e) = self.broker.run_until(t) {
            self.fail(e.to_string());
        }
        self.settle();
    }

    fn fail(&mut self, msg: String) {
        eprintln!("experiment {} halted: {msg}", self.broker.experiment().id);
        self.error = Some(msg);
        self.feed.end(End::Halted);
    }

    fn settle(&mut self) {
        if self.broker.phase().is_terminal() {
            self.feed.end(End::Finished);
        }
    }

    /// Returns false on shutdown.
    fn handle(&mut self, req: Request) -> bool {
        match req {
            Request::Command(cmd, reply) => {
                let result = if self.error.is_some() {
                    Err(CommandError::Conflict(self.broker.phase()))
                } else {
                    self.broker.command(cmd).map(|()| status_json(&self.broker, None))
                };
                if self.broker.engine().is_halted() && self.error.is_none() {
                    self.fail("journal storage failed".into());
                }
                self.settle();
                let _ = reply.send(result);
            }
            Request::Status(reply) => {
                let _ = reply.send(status_json(&self.broker, self.error.as_deref()));
            }
            Request::Jobs { state, resource, reply } => {
                let _ = reply.send(jobs_json(&self.broker, state, resource.as_ref()));
            }
            Request::Shutdown(reply) => {
                let _ = reply.send(());
                return false;
            }
        }
        true
    }
}

async fn actor(broker: Broker, mut rx: mpsc::Receiver<Request>, feed: Arc<Feed>, pace: f64) {
    let mut a = Actor {
        broker,
        feed,
        error: None,
    };
    a.settle();
    // wall instant and virtual time at which paced advancing (re)started
    let mut anchor: Option<(Instant, Secs)> = None;
    let mut steps = 0u32;
    loop {
        if a.idle() {
            anchor = None;
            let Some(req) = rx.recv().await else { break };
            if !a.handle(req) {
                break;
            }
            continue;
        }
        if pace <= 0.0 {
            while let Ok(req) = rx.try_recv() {
                if !a.handle(req) {
                    return;
                }
            }
            if !a.idle() {
                a.step();
            }
            steps += 1;
            if steps.is_multiple_of(64) {
                tokio::task::yield_now().await;
            }
            continue;
        }
        let next = a.broker.next_instant().unwrap_or(a.broker.now());
        let (w0, v0) = *anchor.get_or_insert((Instant::now(), a.broker.now()));
        let due = w0 + Duration::from_secs_f64(next.saturating_sub(v0) as f64 / pace);
        tokio::select! {
            _ = tokio::time::sleep_until(due) => a.step(),
            req = rx.recv() => {
                let Some(req) = req else { break };
                if matches!(req, Request::Command(..)) {
                    // commands take effect at the current virtual instant
                    let now = v0 + (w0.elapsed().as_secs_f64() * pace) as Secs;
                    if now > a.broker.now() && !a.idle() {
                        a.advance_to(now);
                    }
                }
                if !a.handle(req) {
                    break;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn gone() -> Self {
        Self::new(StatusCode::NOT_FOUND, "experiment is gone")
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let status = match &e {
            CommandError::Conflict(_) | CommandError::JobExecuting(_) => StatusCode::CONFLICT,
            CommandError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CommandError::UnknownJob(_) => StatusCode::NOT_FOUND,
            CommandError::Broker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Overrides {
    seed: Option<u64>,
    max_load: Option<f64>,
    job_seconds: Option<f64>,
    job_jitter: Option<f64>,
    task_error_rate: Option<f64>,
    stage_delay: Option<Secs>,
    lost_work_fraction: Option<f64>,
    retry_limit: Option<u32>,
}

#[derive(Deserialize)]
struct CreateRequest {
    plan: String,
    testbed: Option<String>,
    qos: QoSConstraints,
    config: Option<Overrides>,
    /// Virtual seconds per wall second; 0 runs unpaced.
    pace: Option<f64>,
    #[serde(default)]
    start: bool,
}

fn run_config(testbed: String, o: Option<Overrides>) -> RunConfig {
    let mut c = RunConfig {
        testbed,
        ..RunConfig::default()
    };
    let Some(o) = o else { return c };
    let d = FabricParams::default();
    c.fabric = FabricParams {
        seed: o.seed.unwrap_or(d.seed),
        max_load: o.max_load.unwrap_or(d.max_load),
        stage_delay: o.stage_delay.unwrap_or(d.stage_delay),
        task_error_rate: o.task_error_rate.unwrap_or(d.task_error_rate),
    };
    if let Some(v) = o.job_seconds {
        c.job_seconds = v;
    }
    if let Some(v) = o.job_jitter {
        c.job_jitter = v;
    }
    if let Some(v) = o.lost_work_fraction {
        c.lost_work_fraction = v;
    }
    if let Some(v) = o.retry_limit {
        c.retry_limit = v;
    }
    c
}

async fn create(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let testbed = app.testbed(req.testbed.as_deref())?;
    let pace = req.pace.unwrap_or(app.0.config.pace);
    if !pace.is_finite() || pace < 0.0 {
        return Err(ApiError::invalid("pace must be a non-negative number"));
    }
    let n = app.0.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("exp-{n}");
    let (inner, path): (Box<dyn JournalStore>, Option<PathBuf>) = match &app.0.config.data_dir {
        Some(dir) => {
            let path = dir.join(format!("{id}.jsonl"));
            let j = FileJournal::open(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            (Box::new(j), Some(path))
        }
        None => (Box::new(MemoryJournal::new()), None),
    };
    let feed = Feed::new(Vec::new());
    let tee = Tee {
        inner,
        feed: feed.clone(),
    };
    let created = Broker::create(id.clone(), &req.plan, req.qos, run_config(testbed, req.config), Box::new(tee));
    let mut broker = match created {
        Ok(b) => b,
        Err(e) => {
            if let Some(p) = &path {
                let _ = std::fs::remove_file(p);
            }
            return Err(ApiError::invalid(e.to_string()));
        }
    };
    if req.start {
        broker.command(ClientCommand::Start)?;
    }
    let jobs = broker.experiment().jobs.len();
    app.spawn(id.clone(), broker, feed, path, pace);
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "jobs": jobs }))).into_response())
}

async fn call(handle: &Handle, cmd: ClientCommand) -> Result<Value, ApiError> {
    let (reply, rx) = oneshot::channel();
    handle
        .tx
        .send(Request::Command(cmd, reply))
        .await
        .map_err(|_| ApiError::gone())?;
    Ok(rx.await.map_err(|_| ApiError::gone())??)
}

async fn command(app: &AppState, id: &str, cmd: ClientCommand) -> Result<Json<Value>, ApiError> {
    let handle = app.handle(id)?;
    Ok(Json(call(&handle, cmd).await?))
}

async fn start(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    command(&app, &id, ClientCommand::Start).await
}

async fn stop(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    command(&app, &id, ClientCommand::Stop).await
}

async fn pause(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    command(&app, &id, ClientCommand::Pause).await
}

async fn update_qos(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let handle = app.handle(&id)?;
    let patch: QosPatch = parse_body(&body)?;
    let status = call(&handle, ClientCommand::UpdateQos(patch)).await?;
    Ok(Json(json!({ "qos": status["qos"], "t": status["t"], "seq": status["seq"] })))
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let handle = app.handle(&id)?;
    let (reply, rx) = oneshot::channel();
    handle.tx.send(Request::Status(reply)).await.map_err(|_| ApiError::gone())?;
    Ok(Json(rx.await.map_err(|_| ApiError::gone())?))
}

#[derive(Deserialize)]
struct JobsQuery {
    state: Option<String>,
    resource: Option<String>,
}

async fn jobs(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<JobsQuery>,
) -> Result<Json<Value>, ApiError> {
    let handle = app.handle(&id)?;
    let state = match q.state.as_deref() {
        None | Some("") => None,
        Some(s) => Some(JobState::parse(s).ok_or_else(|| ApiError::invalid(format!("unknown job state `{s}`")))?),
    };
    let (reply, rx) = oneshot::channel();
    handle
        .tx
        .send(Request::Jobs {
            state,
            resource: q.resource.map(ResourceId::new),
            reply,
        })
        .await
        .map_err(|_| ApiError::gone())?;
    Ok(Json(rx.await.map_err(|_| ApiError::gone())?))
}

#[derive(Deserialize)]
struct SeriesQuery {
    interval: Option<Secs>,
}

async fn timeseries(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SeriesQuery>,
) -> Result<Response, ApiError> {
    let handle = app.handle(&id)?;
    let interval = q.interval.unwrap_or(DEFAULT_INTERVAL);
    if interval == 0 {
        return Err(ApiError::invalid("interval must be positive"));
    }
    let lines = handle.feed.snapshot();
    match export_timeseries(&lines, interval) {
        Ok(csv) => Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response()),
        Err(TimeseriesError::NoData) => Err(ApiError::not_found("no time series data yet")),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    from: Option<u64>,
}

struct Cursor {
    feed: Arc<Feed>,
    status: watch::Receiver<FeedStatus>,
    next: usize,
    closed: bool,
}

fn record_stream(feed: Arc<Feed>, from: u64) -> impl Stream<Item = Result<Event, std::convert::Infallible>> {
    let cursor = Cursor {
        status: feed.status.subscribe(),
        feed,
        next: from.saturating_sub(1) as usize,
        closed: false,
    };
    futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if c.closed {
                return None;
            }
            let status = *c.status.borrow_and_update();
            if status.end == Some(End::Deleted) {
                c.closed = true;
                let frame = Event::default()
                    .event("error")
                    .data(json!({ "error": "experiment deleted" }).to_string());
                return Some((Ok(frame), c));
            }
            let line = c.feed.lines.read().unwrap().get(c.next).cloned();
            if let Some(line) = line {
                c.next += 1;
                return Some((Ok(Event::default().data(&*line)), c));
            }
            match status.end {
                Some(End::Finished) => return None,
                Some(End::Halted) => {
                    c.closed = true;
                    let frame = Event::default()
                        .event("error")
                        .data(json!({ "error": "experiment halted" }).to_string());
                    return Some((Ok(frame), c));
                }
                _ => {}
            }
            if c.status.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>>, ApiError> {
    let handle = app.handle(&id)?;
    Ok(Sse::new(record_stream(handle.feed, q.from.unwrap_or(0))).keep_alive(KeepAlive::default()))
}

async fn delete(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let handle = app
        .0
        .experiments
        .lock()
        .unwrap()
        .remove(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown experiment `{id}`")))?;
    let (reply, rx) = oneshot::channel();
    if handle.tx.send(Request::Shutdown(reply)).await.is_ok() {
        let _ = rx.await;
    }
    handle.feed.end(End::Deleted);
    if let Some(p) = handle.journal {
        let _ = std::fs::remove_file(p);
    }
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/experiments", post(create))
        .route("/experiments/{id}", get(status).delete(delete))
        .route("/experiments/{id}/start", post(start))
        .route("/experiments/{id}/stop", post(stop))
        .route("/experiments/{id}/pause", post(pause))
        .route("/experiments/{id}/qos", patch(update_qos))
        .route("/experiments/{id}/jobs", get(jobs))
        .route("/experiments/{id}/timeseries", get(timeseries))
        .route("/experiments/{id}/events", get(events))
        .with_state(app)
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> io::Result<()> {
    let app = AppState::new(config);
    let recovered = app.recover_all()?;
    if !recovered.is_empty() {
        eprintln!("recovered {}", recovered.join(", "));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

