//! Annotation HTTP service, schema version 1.
//!
//! | method | path                          | success           | errors              |
//! |--------|-------------------------------|-------------------|---------------------|
//! | GET    | `/api/v1/query/next`          | 200 `QueryPayload`, 204 when idle | 503 no active run |
//! | POST   | `/api/v1/label`               | 200 `SubmitAck`   | 409 stale/duplicate, 422 bad body, 503 |
//! | GET    | `/api/v1/status`              | 200 `RunStatus`   |                     |
//! | POST   | `/api/v1/checkpoint`          | 200 `Deployment`  | 404 unknown id, 503 no run dir |
//! | GET    | `/api/v1/segment/{id}/track`  | 200 `TrackPayload`| 404 not pending     |
//!
//! Error bodies are `{"error": "<message>"}`. Payloads never carry reward
//! values of any kind.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use recpref_core::envs::KinematicSample;
use recpref_core::orchestrator::{select_deployment, RunStatus, StatusBoard};
use recpref_core::preference::{Choice, HumanQueue, Segment, SubmitAck};
use recpref_core::Error;

pub const SCHEMA_VERSION: u32 = 1;
/// Upper bound on the playback sample rate.
pub const MAX_PLAYBACK_HZ: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub p: [f64; 3],
    /// `[w, x, y, z]`.
    pub q: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPayload {
    pub segment_id: u64,
    /// Seconds covered by the segment.
    pub duration: f64,
    pub track: Vec<TrackPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub schema_version: u32,
    pub pair_id: u64,
    pub round: u64,
    pub labels_remaining: usize,
    pub first: TrackPayload,
    pub second: TrackPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub pair_id: u64,
    pub choice: Choice,
    /// Wall-clock seconds since the Unix epoch, as reported by the client.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSelection {
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// What the service is attached to. `queue` is absent when no training
/// process shares its label queue (e.g. serving a finished run).
#[derive(Debug, Clone)]
pub struct AppState {
    pub status: Arc<StatusBoard>,
    pub queue: Option<Arc<HumanQueue>>,
}

/// Keeps every `stride`-th sample so the rate stays at or below
/// [`MAX_PLAYBACK_HZ`].
pub fn downsample(track: &[KinematicSample]) -> Vec<TrackPoint> {
    if track.len() < 2 {
        return track.iter().map(point).collect();
    }
    let dt = (track[track.len() - 1].t - track[0].t) / (track.len() - 1) as f64;
    let stride = if dt > 0.0 { (1.0 / (dt * MAX_PLAYBACK_HZ) - 1e-9).ceil().max(1.0) as usize } else { 1 };
    track.iter().step_by(stride).map(point).collect()
}

fn point(s: &KinematicSample) -> TrackPoint {
    TrackPoint {
        t: s.t,
        p: s.position,
        q: s.attitude,
    }
}

pub fn track_payload(seg: &Segment) -> TrackPayload {
    let duration = match (seg.track.first(), seg.track.last()) {
        (Some(a), Some(b)) if seg.track.len() > 1 => (b.t - a.t) * seg.track.len() as f64 / (seg.track.len() - 1) as f64,
        _ => 0.0,
    };
    TrackPayload {
        segment_id: seg.id,
        duration,
        track: downsample(&seg.track),
    }
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(ErrorBody { error: msg.into() })).into_response()
}

fn active_queue(state: &AppState) -> Result<&Arc<HumanQueue>, Response> {
    match &state.queue {
        Some(q) if state.status.snapshot().active => Ok(q),
        _ => Err(error(StatusCode::SERVICE_UNAVAILABLE, "no active training run")),
    }
}

async fn next_query(State(state): State<AppState>) -> Response {
    let q = match active_queue(&state) {
        Ok(q) => q,
        Err(r) => return r,
    };
    match q.next_query() {
        Some(p) => Json(QueryPayload {
            schema_version: SCHEMA_VERSION,
            pair_id: p.pair_id,
            round: p.round,
            labels_remaining: q.labels_remaining(),
            first: track_payload(&p.seg1),
            second: track_payload(&p.seg2),
        })
        .into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn submit_label(State(state): State<AppState>, Json(sub): Json<LabelSubmission>) -> Response {
    let q = match active_queue(&state) {
        Ok(q) => q.clone(),
        Err(r) => return r,
    };
    // the journal write is blocking file I/O
    let res = tokio::task::spawn_blocking(move || q.submit(sub.pair_id, sub.choice, sub.timestamp)).await;
    match res {
        Ok(Ok(ack)) => {
            state.status.update(|s| {
                s.labels_used = ack.labels_used;
                s.labels_remaining = ack.labels_remaining;
            });
            Json::<SubmitAck>(ack).into_response()
        }
        Ok(Err(e @ (Error::DuplicateLabel(_) | Error::UnknownPair(_) | Error::BudgetExhausted(_)))) => {
            error(StatusCode::CONFLICT, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn status(State(state): State<AppState>) -> Json<RunStatus> {
    Json(state.status.snapshot())
}

async fn select_checkpoint(State(state): State<AppState>, Json(sel): Json<CheckpointSelection>) -> Response {
    let Some(dir) = state.status.run_dir() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no run directory attached");
    };
    match select_deployment(&dir, &sel.checkpoint, "annotator") {
        Ok(d) => {
            state.status.update(|s| s.deployment = Some(d.checkpoint.clone()));
            Json(d).into_response()
        }
        Err(e @ Error::UnknownCheckpoint(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn segment_track(State(state): State<AppState>, Path(id): Path<u64>) -> Response {
    match state.queue.as_ref().and_then(|q| q.find_segment(id)) {
        Some(seg) => Json(track_payload(&seg)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("segment {id} is not pending")),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/query/next", get(next_query))
        .route("/api/v1/label", post(submit_label))
        .route("/api/v1/status", get(status))
        .route("/api/v1/checkpoint", post(select_checkpoint))
        .route("/api/v1/segment/{id}/track", get(segment_track))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves on a background thread with its own runtime.
/// Returns the bound address (useful with port 0).
pub fn spawn(addr: &str, state: AppState) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        if let Err(e) = rt.block_on(serve(listener, state)) {
            tracing::error!("annotation service stopped: {e}");
        }
    });
    Ok((local, handle))
}
