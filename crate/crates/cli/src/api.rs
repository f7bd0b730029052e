//! Platform REST API, live event stream and export.

use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration as StdDuration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ovinet_core::device::{DeviceConfig, FieldProblem, RpcKind};
use ovinet_core::platform::{Metric, PlatformError, PlatformEvent, Registration};
use ovinet_core::scenario::SimError;
use ovinet_core::{Simulation, Timestamp};

pub const DEFAULT_GRID_M: f64 = 1000.0;
const POLL: StdDuration = StdDuration::from_millis(100);

pub type SharedSim = Arc<Mutex<Simulation>>;

#[derive(Clone)]
pub struct AppState {
    pub sim: SharedSim,
}

impl AppState {
    pub fn new(sim: SharedSim) -> Self {
        Self { sim }
    }

    fn lock(&self) -> Result<MutexGuard<'_, Simulation>, ApiError> {
        self.sim
            .lock()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "simulation lock poisoned"))
    }
}

/// Error body shared by every endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldProblem>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: code.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let msg = e.to_string();
        match e {
            PlatformError::UnknownDevice(_) | PlatformError::UnknownRequest(_) => {
                Self::new(StatusCode::NOT_FOUND, "not_found", msg)
            }
            PlatformError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", msg),
            PlatformError::DeviceFault { .. } => Self::new(StatusCode::CONFLICT, "device_fault", msg),
            PlatformError::Invalid(fields) => Self {
                status: StatusCode::BAD_REQUEST,
                body: ErrorBody {
                    error: "invalid".into(),
                    message: msg,
                    fields,
                },
            },
            PlatformError::BadTelemetry(_) | PlatformError::InvalidRange { .. } => Self::bad_request(msg),
            PlatformError::Store(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Platform(p) => p.into(),
            SimError::UnknownDevice(_) => Self::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            SimError::Device(_) => Self::new(StatusCode::CONFLICT, "device_fault", e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
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
        .route("/devices", get(list_devices).post(register_device))
        .route("/devices/{id}", get(get_device))
        .route("/devices/{id}/series", get(series))
        .route("/devices/{id}/rpc", post(dispatch_rpc))
        .route("/rpc/{request_id}", get(get_rpc))
        .route("/alarms", get(alarms))
        .route("/riskmap", get(riskmap))
        .route("/events", get(events))
        .route("/export", get(export))
        .route("/sim/clock", get(clock))
        .route("/sim/advance", post(advance))
        .with_state(state)
}

async fn list_devices(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    let devices: Vec<_> = sim.platform().devices().cloned().collect();
    Ok(Json(devices))
}

async fn get_device(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    let d = sim
        .platform()
        .device(&id)
        .cloned()
        .ok_or(PlatformError::UnknownDevice(id))?;
    Ok(Json(d))
}

async fn register_device(State(st): State<AppState>, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let cfg: DeviceConfig =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed registration: {e}")))?;
    let mut sim = st.lock()?;
    let now = sim.now();
    let status = match sim.platform_mut().register(&cfg, now)? {
        Registration::Created => StatusCode::CREATED,
        Registration::Unchanged => StatusCode::OK,
    };
    let record = sim.platform().device(&cfg.device_id).cloned();
    Ok((status, Json(record)))
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    key: Option<String>,
    from: Option<Timestamp>,
    to: Option<Timestamp>,
}

fn range(from: Option<Timestamp>, to: Option<Timestamp>, now: Timestamp) -> (Timestamp, Timestamp) {
    (from.unwrap_or(DateTime::<Utc>::MIN_UTC), to.unwrap_or(now))
}

async fn series(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RangeParams>,
) -> ApiResult<impl IntoResponse> {
    let key: Metric = q
        .key
        .as_deref()
        .unwrap_or("egg_count")
        .parse()
        .map_err(ApiError::bad_request)?;
    let sim = st.lock()?;
    let (from, to) = range(q.from, q.to, sim.now());
    Ok(Json(sim.platform().query_series(&id, key, from, to)?))
}

async fn alarms(State(st): State<AppState>, Query(q): Query<RangeParams>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    let (from, to) = range(q.from, q.to, sim.now());
    let list: Vec<_> = sim.platform().alarms_between(from, to)?.into_iter().cloned().collect();
    Ok(Json(list))
}

#[derive(Debug, Deserialize)]
struct RiskParams {
    at: Option<Timestamp>,
    grid: Option<f64>,
}

async fn riskmap(State(st): State<AppState>, Query(q): Query<RiskParams>) -> ApiResult<impl IntoResponse> {
    let grid = q.grid.unwrap_or(DEFAULT_GRID_M);
    if !(grid.is_finite() && grid > 0.0) {
        return Err(ApiError::bad_request(format!("grid must be a positive size in meters, got {grid}")));
    }
    let sim = st.lock()?;
    let at = q.at.unwrap_or(sim.now());
    Ok(Json(sim.platform().risk_map(at, grid)))
}

async fn dispatch_rpc(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    let kind: RpcKind =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed command: {e}")))?;
    let mut sim = st.lock()?;
    let record = sim.dispatch_rpc(&id, kind)?;
    Ok((StatusCode::ACCEPTED, Json(record)))
}

async fn get_rpc(State(st): State<AppState>, Path(request_id): Path<String>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    let r = sim
        .platform()
        .rpc(&request_id)
        .cloned()
        .ok_or(PlatformError::UnknownRequest(request_id))?;
    Ok(Json(r))
}

async fn export(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], sim.platform().export_jsonl()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClockBody {
    pub now: Timestamp,
}

async fn clock(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    let sim = st.lock()?;
    Ok(Json(ClockBody { now: sim.now() }))
}

#[derive(Debug, Deserialize)]
struct AdvanceParams {
    seconds: f64,
}

async fn advance(State(st): State<AppState>, Query(q): Query<AdvanceParams>) -> ApiResult<impl IntoResponse> {
    if !(q.seconds.is_finite() && q.seconds >= 0.0) {
        return Err(ApiError::bad_request("seconds must be a non-negative number"));
    }
    let step = Duration::microseconds((q.seconds * 1e6).round() as i64);
    let sim = st.sim.clone();
    let now = tokio::task::spawn_blocking(move || -> Result<Timestamp, ApiError> {
        let mut sim = sim
            .lock()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "simulation lock poisoned"))?;
        sim.run_for(step)?;
        Ok(sim.now())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(ClockBody { now }))
}

#[derive(Debug, Deserialize)]
struct EventParams {
    after: Option<u64>,
}

/// Server-sent events: every platform notification after the cursor, one
/// SSE message each, with the sequence number as the event id.
async fn events(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<EventParams>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let cursor = resume.or(q.after).unwrap_or(0);
    let stream = stream::unfold((st, cursor), |(st, cursor)| async move {
        loop {
            let batch: Vec<(u64, PlatformEvent)> = match st.sim.lock() {
                Ok(sim) => sim.platform().events_after(cursor).to_vec(),
                Err(_) => return None,
            };
            if let Some((last, _)) = batch.last() {
                let next = *last;
                let out: Vec<Result<Event, Infallible>> = batch.iter().map(|(seq, ev)| Ok(sse_event(*seq, ev))).collect();
                return Some((stream::iter(out), (st, next)));
            }
            tokio::time::sleep(POLL).await;
        }
    })
    .flatten();
    Sse::new(stream).keep_alive(KeepAlive::default())
}

fn sse_event(seq: u64, ev: &PlatformEvent) -> Event {
    let kind = match ev {
        PlatformEvent::Device { .. } => "device",
        PlatformEvent::Telemetry { .. } => "telemetry",
        PlatformEvent::Alarm { .. } => "alarm",
        PlatformEvent::Rpc { .. } => "rpc",
    };
    let data = serde_json::to_string(ev).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string());
    Event::default().id(seq.to_string()).event(kind).data(data)
}

/// Advances the simulation in step with the wall clock, `speed` simulated
/// seconds per real second.
pub async fn pace(sim: SharedSim, speed: f64) {
    let mut tick = tokio::time::interval(POLL);
    let step = Duration::microseconds((POLL.as_secs_f64() * speed * 1e6).round() as i64);
    loop {
        tick.tick().await;
        let sim = sim.clone();
        let res = tokio::task::spawn_blocking(move || match sim.lock() {
            Ok(mut s) => s.run_for(step).map_err(|e| e.to_string()),
            Err(_) => Err("simulation lock poisoned".to_string()),
        })
        .await;
        match res {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                log::error!("simulation stopped: {e}");
                return;
            }
            Err(e) => {
                log::error!("pacing task failed: {e}");
                return;
            }
        }
    }
}
